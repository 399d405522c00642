"""Ablation grids over reasoning steps, subnodes, flow mode and head, plus the R=1 equivalence check."""

from __future__ import annotations

import csv
import dataclasses
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .autodiff import Tensor
from .data import Dataset, DatasetManifest, generate_synthetic
from .encoders import Vocabulary
from .errors import ConfigError
from .heads import AgotConfig, HeadKind, agot_forward, cotpt_forward
from .objective import DEFAULT_TAU, MetricReport
from .train import Model, TrainConfig, batch_loss, build_model, evaluate, make_split, sgd_step, train_run

AXES = ("steps", "subnodes", "alpha_mode", "head")
PUBLISHED_SEEDS = (0, 1, 2)
PUBLISHED_GRIDS: dict[str, tuple[Any, ...]] = {
    "steps": tuple(range(2, 10)),
    "subnodes": tuple(range(2, 7)),
    "alpha_mode": ("0.1", "0.3", "0.5", "0.7", "dynamic"),
}
# Row labels mirror the column headers of the published tables.
TABLE_LABELS = {"steps": "Steps", "subnodes": "Number", "alpha_mode": "alpha", "head": "Head"}


def standard_fixture(seed: int = 0) -> Dataset:
    """Eight separable classes, 64 examples each, multi-template captions."""
    manifest = DatasetManifest(num_classes=8, raw_dim=32, sigma=0.15, seed=seed, multi_template=True)
    return generate_synthetic(manifest, 64)


class AblationError(RuntimeError):
    """Some grid cells failed; ``partial`` holds the cells that finished."""

    def __init__(self, failed: dict[tuple[Any, int], str], partial: "AblationResult"):
        cells = ", ".join(f"({v}, seed {s}): {msg}" for (v, s), msg in failed.items())
        super().__init__(f"{len(failed)} grid cell(s) failed: {cells}")
        self.failed = failed
        self.partial = partial


@dataclass(frozen=True)
class AblationGrid:
    axis: str
    values: tuple[Any, ...]
    base: TrainConfig = TrainConfig()
    seeds: tuple[int, ...] = PUBLISHED_SEEDS

    def __post_init__(self):
        if self.axis not in AXES:
            raise ConfigError(f"unknown ablation axis {self.axis!r}; expected one of {AXES}")
        object.__setattr__(self, "values", tuple(self.values))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.values:
            raise ConfigError("ablation grid needs at least one value")
        if not self.seeds:
            raise ConfigError("ablation grid needs at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"replicate seeds must be distinct, got {self.seeds}")
        for v in self.values:
            self.cell_config(v, self.seeds[0])  # validate every cell before any training

    @classmethod
    def published(cls, axis: str, base: TrainConfig = TrainConfig(), seeds=PUBLISHED_SEEDS) -> "AblationGrid":
        if axis not in PUBLISHED_GRIDS:
            raise ConfigError(f"no published grid for axis {axis!r}")
        return cls(axis, PUBLISHED_GRIDS[axis], base, tuple(seeds))

    def cell_config(self, value: Any, seed: int) -> TrainConfig:
        cfg = self.base.replace(seed=seed, run_id=f"{self.axis}={value}/seed={seed}")
        if self.axis == "steps":
            return cfg.replace(agot=dataclasses.replace(cfg.agot, Z=int(value)))
        if self.axis == "subnodes":
            return cfg.replace(agot=dataclasses.replace(cfg.agot, R=int(value)))
        if self.axis == "alpha_mode":
            return cfg.replace(alpha_mode=str(value))
        kind = HeadKind.parse(value)
        agot = dataclasses.replace(cfg.agot, R=1) if kind is HeadKind.COTPT else cfg.agot
        return cfg.replace(head=kind, agot=agot)


@dataclass
class AblationResult:
    axis: str
    values: tuple[Any, ...]
    seeds: tuple[int, ...]
    cells: dict[tuple[Any, int], MetricReport] = field(default_factory=dict)
    train_cells: dict[tuple[Any, int], MetricReport] = field(default_factory=dict)
    alphas: dict[tuple[Any, int], np.ndarray] = field(default_factory=dict)

    def scores(self, value: Any) -> list[float]:
        return [self.cells[(value, s)].recall_at_1 for s in self.seeds if (value, s) in self.cells]

    def mean(self, value: Any) -> float:
        return float(np.mean(self.scores(value)))

    def std(self, value: Any) -> float:
        xs = self.scores(value)
        return statistics.pstdev(xs) if len(xs) > 1 else 0.0

    def summary(self) -> list[tuple[Any, float, float]]:
        return [(v, self.mean(v), self.std(v)) for v in self.values if self.scores(v)]


@dataclass
class CellOutcome:
    value: Any
    seed: int
    heldout: MetricReport | None = None
    train: MetricReport | None = None
    alphas: np.ndarray | None = None
    error: str = ""


def run_cell(grid: AblationGrid, value: Any, seed: int, dataset: Dataset) -> CellOutcome:
    """Train one grid cell and evaluate it on the held-out examples of its split."""
    cfg = grid.cell_config(value, seed)
    try:
        split = make_split(cfg, dataset)
        model = build_model(cfg, Vocabulary.from_texts(dataset.captions()), dataset.raw_dim)
        _, history = train_run(cfg, dataset, split=split, model=model)
        cands = dataset.class_captions()
        cands = {c: cands[c] for c in split.classes}
        meta = dict(run_id=cfg.run_id, head=cfg.head.value, Z=cfg.agot.Z, R=cfg.agot.R,
                    alpha_mode=cfg.alpha_mode, epoch=cfg.epochs)
        held = evaluate(model, split.heldout, cfg.tau, cands, **meta)
        held.loss = history[-1].loss if history else float("nan")
        alphas = None
        if cfg.head in (HeadKind.AGOT, HeadKind.COTPT):
            out = model.head.forward(model.image_features(split.heldout.features()))
            alphas = np.stack(out.alphas, axis=1)
        return CellOutcome(value, seed, held, history[-1] if history else None, alphas)
    except Exception as e:  # collected and re-raised as a partial-result error
        return CellOutcome(value, seed, error=f"{type(e).__name__}: {e}")


def run_grid(grid: AblationGrid, dataset: Dataset | None = None, workers: int = 1) -> AblationResult:
    """One training run per (value, seed); cells are independent and may run in parallel."""
    if dataset is None:
        dataset = standard_fixture()
    jobs = [(v, s) for v in grid.values for s in grid.seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run_cell, *zip(*[(grid, v, s, dataset) for v, s in jobs])))
    else:
        outcomes = [run_cell(grid, v, s, dataset) for v, s in jobs]

    result = AblationResult(grid.axis, grid.values, grid.seeds)
    failed: dict[tuple[Any, int], str] = {}
    for o in outcomes:
        key = (o.value, o.seed)
        if o.error:
            failed[key] = o.error
            continue
        result.cells[key] = o.heldout
        if o.train is not None:
            result.train_cells[key] = o.train
        if o.alphas is not None:
            result.alphas[key] = o.alphas
    if failed:
        raise AblationError(failed, result)
    return result


def write_csv(result: AblationResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["axis", "value", "seed", "heldout_recall_at_1", "train_recall_at_1", "final_loss", "epoch"])
        for v in result.values:
            for s in result.seeds:
                rep = result.cells.get((v, s))
                if rep is None:
                    continue
                tr = result.train_cells.get((v, s))
                w.writerow([result.axis, v, s, f"{rep.recall_at_1:.6f}",
                            "" if tr is None else f"{tr.recall_at_1:.6f}", f"{rep.loss:.6f}", rep.epoch])
        for v, m, sd in result.summary():
            w.writerow([result.axis, v, "mean", f"{m:.6f}", "", "", ""])
            w.writerow([result.axis, v, "std", f"{sd:.6f}", "", "", ""])


def render_table(result: AblationResult) -> str:
    """Plain-text table in the published layout: one header row of values, one Recall row."""
    vals = [v for v, _, _ in result.summary()]
    head = [TABLE_LABELS[result.axis]] + [_label(v) for v in vals]
    recall = ["Recall"] + [f"{100 * m:.2f}" for _, m, _ in result.summary()]
    spread = ["+/- std"] + [f"{100 * sd:.2f}" for _, _, sd in result.summary()]
    widths = [max(len(r[i]) for r in (head, recall, spread)) for i in range(len(head))]
    fmt = lambda row: "  ".join(c.rjust(w) for c, w in zip(row, widths))
    rule = "-" * len(fmt(head))
    return "\n".join([rule, fmt(head), rule, fmt(recall), fmt(spread), rule])


def trend_line(result: AblationResult) -> str:
    """One-line summary of the trend shown by a grid; reported, never used as a gate."""
    rows = result.summary()
    if not rows:
        return "no finished cells"
    name = TABLE_LABELS[result.axis]
    best_v, best_m, _ = max(rows, key=lambda r: r[1])
    if result.axis == "alpha_mode" and any(v == "dynamic" for v, _, _ in rows):
        fixed = [(v, m) for v, m, _ in rows if v != "dynamic"]
        dyn = result.mean("dynamic")
        if not fixed:
            return f"dynamic {100 * dyn:.2f}"
        fv, fm = max(fixed, key=lambda r: r[1])
        verdict = "yes" if dyn >= fm - 0.01 else "no"
        return (f"dynamic {100 * dyn:.2f} vs best fixed {name}={_label(fv)} {100 * fm:.2f}; "
                f"dynamic within one point of best fixed: {verdict}")
    first, last = rows[0], rows[-1]
    return (f"best {name}={_label(best_v)} ({100 * best_m:.2f}); "
            f"{name}={_label(first[0])}: {100 * first[1]:.2f}, {name}={_label(last[0])}: {100 * last[1]:.2f}")


def _label(v: Any) -> str:
    return "Dynamic" if v == "dynamic" else str(v.value if isinstance(v, HeadKind) else v)


# ---------------------------------------------------------------- flow-mode comparison


@dataclass
class FlowComparison:
    result: AblationResult
    table: str
    dynamic_mean: float
    best_fixed_mean: float
    alpha_in_range: bool

    @property
    def dynamic_within_one_point(self) -> bool:
        """Reported trend only: dynamic >= best fixed ratio minus one point."""
        return self.dynamic_mean >= self.best_fixed_mean - 0.01


def flow_mode_comparison(cfg: TrainConfig, fixed_values: Sequence[float] = (0.1, 0.3, 0.5, 0.7),
                         seeds: Sequence[int] = PUBLISHED_SEEDS, dataset: Dataset | None = None,
                         workers: int = 1) -> FlowComparison:
    for a in fixed_values:
        if not 0 < float(a) < 1:
            raise ConfigError(f"fixed alpha must lie in (0, 1), got {a}")
    values = tuple(str(float(a)) for a in fixed_values) + ("dynamic",)
    grid = AblationGrid("alpha_mode", values, cfg.replace(head=HeadKind.AGOT), tuple(seeds))
    res = run_grid(grid, dataset, workers)
    dyn = [res.alphas[("dynamic", s)] for s in grid.seeds if ("dynamic", s) in res.alphas]
    in_range = bool(dyn) and all(np.all((a > 0) & (a < 1)) for a in dyn)
    return FlowComparison(res, render_table(res), res.mean("dynamic"),
                          max(res.mean(v) for v in values[:-1]), in_range)


# ---------------------------------------------------------------- R=1 degeneration


@dataclass
class EquivalenceReport:
    max_abs_diff: float
    worst_seed: int
    n_inputs: int
    tol: float
    max_abs_diff_after_step: float | None = None

    @property
    def passed(self) -> bool:
        after = self.max_abs_diff_after_step
        return self.max_abs_diff < self.tol and (after is None or after < self.tol)


def _probe_inputs(d: int, n: int, seed: int) -> list[Tensor]:
    out = []
    for i in range(n):
        v = np.random.default_rng([seed, i, 7]).normal(size=d)
        out.append(Tensor(v / np.linalg.norm(v)))
    return out


def compare_heads(agot: Model, cot: Model, n_inputs: int = 100, seed: int = 0,
                  tol: float = 1e-12) -> EquivalenceReport:
    """Max abs difference between the AGoT fold and the CoT-PT fold over seeded unit inputs."""
    pa, pc = agot.head.agot, cot.head.agot
    ca, cc = agot.head.cfg, cot.head.cfg
    worst, worst_seed = 0.0, 0
    for i, x in enumerate(_probe_inputs(ca.d, n_inputs, seed)):
        a = agot_forward(pa, ca, x, agot.head.alpha).tokens.data
        c = cotpt_forward(pc, cc, x, cot.head.alpha).tokens.data
        diff = float(np.max(np.abs(a - c)))
        if diff > worst:
            worst, worst_seed = diff, i
    return EquivalenceReport(worst, worst_seed, n_inputs, tol)


def _shared_pair(agot_cfg: AgotConfig, seed: int) -> tuple[Model, Model, Dataset]:
    data = generate_synthetic(DatasetManifest(num_classes=4, raw_dim=12, sigma=0.2, seed=seed), 4)
    vocab = Vocabulary.from_texts(data.captions())
    base = TrainConfig(agot=agot_cfg, seed=seed, encoder_seed=seed, image_hidden=16, batch_size=16)
    agot = build_model(base.replace(head=HeadKind.AGOT), vocab, data.raw_dim)
    cot = build_model(base.replace(head=HeadKind.COTPT, agot=dataclasses.replace(agot_cfg, R=1)), vocab,
                      data.raw_dim)
    cot_state = cot.head.state()
    for name, t in agot.head.state().items():
        if name in cot_state and cot_state[name].shape == t.shape:
            cot_state[name].data = t.data.copy()
    return agot, cot, data


def equivalence_check_r1(agot_cfg: AgotConfig = AgotConfig(Z=3, R=1, L=4, d_e=8, d=8, d_hidden=8),
                         n_inputs: int = 100, seed: int = 0, lockstep: bool = True,
                         tol: float = 1e-12) -> EquivalenceReport:
    """AGoT with one subnode against CoT-PT sharing every parameter, before and after one SGD step."""
    if agot_cfg.R != 1:
        raise ConfigError(f"the degeneration check needs R=1, got R={agot_cfg.R}")
    agot, cot, data = _shared_pair(agot_cfg, seed)
    rep = compare_heads(agot, cot, n_inputs, seed, tol)
    if lockstep:
        feats, labels, caps = data.features(), data.labels(), data.captions()
        for model in (agot, cot):
            params = model.head.parameters()
            batch_loss(model, feats, labels, caps, DEFAULT_TAU, params)
            sgd_step(params, 0.02, 0.9, {})
        rep.max_abs_diff_after_step = compare_heads(agot, cot, n_inputs, seed, tol).max_abs_diff
    return rep


def negative_control_r2(seed: int = 0, n_inputs: int = 100) -> EquivalenceReport:
    """Same comparison with two subnodes on the AGoT side; must not pass."""
    agot, cot, _ = _shared_pair(AgotConfig(Z=3, R=2, L=4, d_e=8, d=8, d_hidden=8), seed)
    return compare_heads(agot, cot, n_inputs, seed)
