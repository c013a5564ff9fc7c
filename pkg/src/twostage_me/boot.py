"""Design-based bootstrap for the second-stage exposure effect.

Both sampling stages are resampled per replicate: monitors first (whole
clusters when cluster labels exist, otherwise individual rows), then
subjects, each with replacement at original size. The basis is frozen
from the original fit, so replicates only gather rows and refit; they do
not re-place spline anchors. Replicate r draws from a fresh generator
seeded by (seed, r), so results are reproducible and insensitive to the
order in which replicates run.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .basis import BasisSpec
from .datasets import MonitorDataset, SubjectDataset
from .errors import (
    AllReplicatesFailed,
    ConfigInvalid,
    CorrectionBlowup,
    DegenerateExposure,
    RankDeficient,
)
from .pipeline import (
    PreparedTwoStage,
    draw_monitor_indices,
    fit_replicate,
    prepare_two_stage,
    run_two_stage,
    seed_list,
)

Z95 = 1.96
MIN_REPLICATES = 50
MAX_FAILURE_RATE = 0.05


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    """Bootstrap distribution summary for the exposure effect estimate.

    replicate_betas has one entry per replicate, NaN where the replicate
    failed (rank-deficient refit, degenerate exposure, or correction
    blowup). se and ci95 come from the successful replicates only;
    reliable is False when more than 5% of replicates failed.
    """

    replicate_betas: np.ndarray
    se: float
    ci95: tuple[float, float]
    n_failed: int
    bias_corrected: bool
    seed: int
    reliable: bool

    @property
    def n_replicates(self) -> int:
        return self.replicate_betas.shape[0]


_REPLICATE_ERRORS = (RankDeficient, DegenerateExposure, CorrectionBlowup)


def _replicate_chunk(args) -> tuple[np.ndarray, np.ndarray]:
    """Fit a batch of replicates; single-argument form so a process pool
    can map over chunks."""
    prep, reps, key, want_bias, track_both = args
    betas_unc = np.full(len(reps), np.nan)
    betas_bc = np.full(len(reps), np.nan)
    n_sub = prep.n
    for pos, rep in enumerate(reps):
        rng = np.random.default_rng([*key, rep])
        m_idx, m_codes = draw_monitor_indices(prep, rng)
        s_idx = rng.integers(0, n_sub, n_sub)
        try:
            r = fit_replicate(
                prep, m_idx, m_codes, s_idx, bias_correct=want_bias
            )
        except _REPLICATE_ERRORS as err:
            if track_both and not isinstance(err, RankDeficient):
                # the plain fit may still be recoverable for the
                # uncorrected track; redo it without the correction
                try:
                    r = fit_replicate(
                        prep, m_idx, m_codes, s_idx, bias_correct=False
                    )
                    betas_unc[pos] = r.beta_hat
                except _REPLICATE_ERRORS:
                    pass
            continue
        betas_unc[pos] = r.beta_hat
        if r.beta_bc is not None:
            betas_bc[pos] = r.beta_bc
    return betas_unc, betas_bc


def _replicate_pass(
    prep: PreparedTwoStage,
    n_replicates: int,
    seed,
    *,
    bias_correct: bool,
    track_both: bool = False,
    n_jobs: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Run the replicate loop; returns (uncorrected, corrected) beta arrays.

    With track_both a replicate that fits but blows up in the correction
    still contributes its uncorrected beta; otherwise only the requested
    flavor is computed and any replicate error yields NaN. Replicate r is
    always seeded by (seed, r), so the result is bit-identical for any
    n_jobs.
    """
    want_bias = bias_correct or track_both
    key = seed_list(seed)
    if n_jobs > 1:
        chunks = [
            c.tolist()
            for c in np.array_split(np.arange(n_replicates), n_jobs)
            if c.size
        ]
        args = [(prep, c, key, want_bias, track_both) for c in chunks]
        with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(pool.map(_replicate_chunk, args))
        return (
            np.concatenate([p[0] for p in parts]),
            np.concatenate([p[1] for p in parts]),
        )
    return _replicate_chunk(
        (prep, list(range(n_replicates)), key, want_bias, track_both)
    )


def _summarize(
    betas: np.ndarray,
    center: float,
    *,
    bias_corrected: bool,
    seed: int,
    percentile: bool,
) -> BootstrapResult:
    ok = np.isfinite(betas)
    n_ok = int(ok.sum())
    n_failed = betas.shape[0] - n_ok
    if n_ok == 0:
        raise AllReplicatesFailed(
            f"all {betas.shape[0]} bootstrap replicates failed"
        )
    se = float(np.std(betas[ok], ddof=1)) if n_ok > 1 else 0.0
    if percentile:
        lo, hi = np.quantile(betas[ok], [0.025, 0.975])
        ci95 = (float(lo), float(hi))
    else:
        ci95 = (center - Z95 * se, center + Z95 * se)
    return BootstrapResult(
        replicate_betas=betas,
        se=se,
        ci95=ci95,
        n_failed=n_failed,
        bias_corrected=bias_corrected,
        seed=seed,
        reliable=(n_failed / betas.shape[0]) <= MAX_FAILURE_RATE,
    )


def bootstrap(
    monitors: MonitorDataset,
    subjects: SubjectDataset,
    spec: BasisSpec,
    n_replicates: int = 200,
    *,
    bias_correct: bool = True,
    seed: int = 0,
    percentile: bool = False,
    n_jobs: int = 1,
) -> BootstrapResult:
    """Bootstrap SE and 95% CI for the exposure effect.

    The CI is Wald-style, centered on the original-data estimate
    (corrected when bias_correct, plain otherwise) with the bootstrap SE;
    percentile=True switches to the 2.5/97.5 empirical quantiles of the
    replicate estimates instead. n_jobs > 1 spreads replicates over that
    many worker processes without changing the result.
    """
    if n_replicates < MIN_REPLICATES:
        raise ConfigInvalid(
            f"n_replicates must be at least {MIN_REPLICATES}, got {n_replicates}"
        )
    base = run_two_stage(monitors, subjects, spec, bias_correct=bias_correct)
    center = (
        base.corrected.beta_bc if bias_correct else base.corrected.beta_hat
    )
    prep = prepare_two_stage(monitors, subjects, spec)
    betas_unc, betas_bc = _replicate_pass(
        prep, n_replicates, seed, bias_correct=bias_correct, n_jobs=n_jobs
    )
    betas = betas_bc if bias_correct else betas_unc
    return _summarize(
        betas,
        center,
        bias_corrected=bias_correct,
        seed=seed,
        percentile=percentile,
    )
