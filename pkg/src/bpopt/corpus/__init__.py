"""Bundled benchmark problems with their reported reference solutions.

Each problem ships as a ``<name>.bpop`` text file next to a
``<name>.expected.json`` sidecar.  The sidecar records the published
optimal value and minimizer (when one is known), reported non-global
local minimizers, and the one-based active-row set of the branch that
produced each point.  Problems are grouped into suites:

* ``core``: problems solved by the default benchmark run,
* ``extended``: larger instances gated behind an explicit flag,
* ``demo``: small instances used for worked illustrations only.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional

from ..model import BilevelProblem, build_problem

_SUITES = ("core", "extended", "demo")


def corpus_dir() -> Path:
    """Directory holding the packaged problem files."""
    return Path(str(resources.files("bpopt") / "corpus"))


def list_problems(suite: Optional[str] = None) -> List[str]:
    """Names of bundled problems, optionally filtered by suite.

    The ``core`` filter is the default benchmark set; ``extended``
    selects only the flag-gated instances.
    """
    if suite is not None and suite not in _SUITES:
        raise ValueError(f"unknown suite {suite!r}, expected one of {_SUITES}")
    names = []
    for path in sorted(corpus_dir().glob("*.bpop")):
        name = path.stem
        if suite is not None:
            expected = load_expected(name)
            if expected.get("suite") != suite:
                continue
        names.append(name)
    return names


def load(name: str) -> BilevelProblem:
    """Parse a bundled problem by name (without the .bpop suffix)."""
    path = corpus_dir() / f"{name}.bpop"
    if not path.is_file():
        raise FileNotFoundError(f"no bundled problem named {name!r}")
    return build_problem(path.read_text(), name=name)


def load_expected(name: str) -> Dict:
    """Reference-solution sidecar for a bundled problem.

    Returns an empty dict when no sidecar exists.
    """
    path = corpus_dir() / f"{name}.expected.json"
    if not path.is_file():
        return {}
    return json.loads(path.read_text())


def resolve_path(spec: str) -> Path:
    """Map a path-like argument to an actual problem file.

    Accepts a real filesystem path, a bare bundled name such as
    ``ex67``, or a ``corpus/ex67.bpop`` style reference that falls back
    to the packaged data when no such file exists on disk.
    """
    direct = Path(spec)
    if direct.is_file():
        return direct
    name = direct.name
    if name.endswith(".bpop"):
        name = name[: -len(".bpop")]
    candidate = corpus_dir() / f"{name}.bpop"
    if candidate.is_file():
        return candidate
    raise FileNotFoundError(f"cannot resolve problem file {spec!r}")
