"""Shared fixtures: the trained desk artifacts and the acceptance scoreboard.

Set ``ADORE_DESK_CACHE`` to a directory to reuse trained artifacts between
runs; without it everything is trained from scratch once per session.
"""

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from adore.controller import ControllerParams
from adore.harness import formats
from adore.harness.corpus import encode, synthetic_text
from adore.harness.pipeline import DeskRecipe, build_desk_artifacts
from adore.model.params import TransformerParams

CORPUS_BYTES = 120_000
TRAIN_BYTES = 100_000

_SCOREBOARD: dict[int, tuple[bool, str]] = {}


@dataclass
class Desk:
    lm: TransformerParams
    controller: ControllerParams
    controller_f1: float
    train_tokens: np.ndarray
    heldout_tokens: np.ndarray
    recipe: DeskRecipe


def _build(cache: Path | None) -> Desk:
    toks = encode(synthetic_text(CORPUS_BYTES, seed=0))
    train, held = toks[:TRAIN_BYTES], toks[TRAIN_BYTES:]
    recipe = DeskRecipe()
    if cache is not None and (cache / "controller.adck").exists():
        meta = json.loads((cache / "desk.json").read_text())
        return Desk(formats.load_model(cache / "lm.adck"),
                    formats.load_controller(cache / "controller.adck"),
                    meta["controller_f1"], train, held, recipe)
    art = build_desk_artifacts(train, held, recipe, seed=0)
    desk = Desk(art.lm, art.controller, art.controller_result.best.f1, train, held, recipe)
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
        formats.save_model(cache / "lm.adck", art.lm)
        formats.save_controller(cache / "controller.adck", art.controller, art.lm.config)
        (cache / "desk.json").write_text(json.dumps({"controller_f1": desk.controller_f1,
                                                     "recipe": recipe.as_dict()}))
    return desk


@pytest.fixture(scope="session")
def desk() -> Desk:
    cache = os.environ.get("ADORE_DESK_CACHE")
    return _build(Path(cache) if cache else None)


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records and prints one acceptance line."""
    def record(n: int, ok: bool, detail: str) -> bool:
        _SCOREBOARD[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _SCOREBOARD:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_SCOREBOARD):
        ok, detail = _SCOREBOARD[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
