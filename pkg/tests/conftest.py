"""Shared fixtures: the land-use fixture CSVs and an in-process CLI runner."""

from __future__ import annotations

import os

import pytest

from twostage_me import cli
from twostage_me.simgen import gen_lur_fixture


@pytest.fixture(scope="session")
def lur_paths(tmp_path_factory):
    """Write the land-use-regression fixture to CSV once per session.

    Returns (monitors_csv, subjects_csv) paths.
    """
    root = tmp_path_factory.mktemp("lur_fixture")
    monitors, subjects, _ = gen_lur_fixture(seed=0)
    mpath = os.path.join(root, "monitors.csv")
    spath = os.path.join(root, "subjects.csv")
    cli.write_monitors_csv(monitors, mpath)
    cli.write_subjects_csv(subjects, spath)
    return mpath, spath


@pytest.fixture()
def run_cli(monkeypatch):
    """Invoke the CLI entry point in-process with a clean environment.

    Strips any TWOSTAGE_* variables first so ambient overrides cannot
    leak into tests; individual tests set their own via monkeypatch.
    """
    for name in list(os.environ):
        if name.startswith(cli.ENV_PREFIX):
            monkeypatch.delenv(name)

    def _run(*argv: str) -> int:
        return cli.main(list(argv))

    return _run
