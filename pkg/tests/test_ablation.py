import csv
import math

import numpy as np
import pytest

from agotlab import ablation
from agotlab.ablation import (
    PUBLISHED_GRIDS,
    AblationError,
    AblationGrid,
    equivalence_check_r1,
    flow_mode_comparison,
    negative_control_r2,
    render_table,
    run_grid,
    trend_line,
    write_csv,
)
from agotlab.data import DatasetManifest, generate_synthetic
from agotlab.encoders import Vocabulary
from agotlab.errors import ConfigError
from agotlab.heads import AgotConfig, HeadKind
from agotlab.train import TrainConfig, build_model, evaluate, make_split, train_run

BASE = TrainConfig(agot=AgotConfig(Z=2, R=2, L=4, d_e=8, d=8, d_hidden=8), epochs=2, batch_size=8, shots=6,
                   image_hidden=12)


@pytest.fixture(scope="module")
def data():
    return generate_synthetic(DatasetManifest(num_classes=4, raw_dim=6, sigma=0.2), 12)


def test_published_grids():
    assert PUBLISHED_GRIDS["steps"] == (2, 3, 4, 5, 6, 7, 8, 9)
    assert PUBLISHED_GRIDS["subnodes"] == (2, 3, 4, 5, 6)
    assert PUBLISHED_GRIDS["alpha_mode"] == ("0.1", "0.3", "0.5", "0.7", "dynamic")
    grid = AblationGrid.published("steps")
    assert grid.seeds == (0, 1, 2)
    assert [grid.cell_config(v, 0).agot.Z for v in grid.values] == list(range(2, 10))


@pytest.mark.parametrize("kw", [
    dict(axis="depth", values=(1,)),
    dict(axis="steps", values=()),
    dict(axis="steps", values=(2,), seeds=()),
    dict(axis="steps", values=(2,), seeds=(1, 1)),
    dict(axis="steps", values=(0,)),
    dict(axis="subnodes", values=(2, -1)),
    dict(axis="alpha_mode", values=("0.5", "1.2")),
    dict(axis="head", values=("clip",)),
])
def test_grid_validation(kw):
    with pytest.raises(ConfigError):
        AblationGrid(base=BASE, **kw)


def test_grid_rejects_before_training(monkeypatch):
    calls = []
    monkeypatch.setattr(ablation, "train_run", lambda *a, **k: calls.append(a))
    with pytest.raises(ConfigError):
        AblationGrid("steps", (2, 3, 0), BASE)
    assert calls == []


def test_cell_configs_vary_only_the_axis():
    grid = AblationGrid("subnodes", (3,), BASE, seeds=(5,))
    cfg = grid.cell_config(3, 5)
    assert cfg.agot.R == 3 and cfg.seed == 5
    assert cfg.replace(agot=BASE.agot, seed=BASE.seed, run_id="") == BASE
    head = AblationGrid("head", ("cotpt", "agot"), BASE, seeds=(0,))
    assert head.cell_config("cotpt", 0).agot.R == 1
    assert head.cell_config("agot", 0).agot.R == BASE.agot.R


def test_singleton_grid_equals_direct_run(data):
    res = run_grid(AblationGrid("steps", (3,), BASE, seeds=(1,)), data)
    cfg = BASE.replace(agot=AgotConfig(Z=3, R=2, L=4, d_e=8, d=8, d_hidden=8), seed=1)
    split = make_split(cfg, data)
    model = build_model(cfg, Vocabulary.from_texts(data.captions()), data.raw_dim)
    train_run(cfg, data, split=split, model=model)
    direct = evaluate(model, split.heldout, cfg.tau)
    assert res.cells[(3, 1)].recall_at_1 == direct.recall_at_1
    assert res.cells[(3, 1)].per_class == direct.per_class


def test_grid_is_deterministic_and_parallel_safe(data):
    grid = AblationGrid("alpha_mode", ("0.3", "dynamic"), BASE, seeds=(0, 1))
    a = run_grid(grid, data)
    b = run_grid(grid, data, workers=2)
    assert a.cells.keys() == b.cells.keys() == {(v, s) for v in grid.values for s in grid.seeds}
    for k in a.cells:
        assert a.cells[k].recall_at_1 == b.cells[k].recall_at_1
        np.testing.assert_array_equal(a.alphas[k], b.alphas[k])
    # fixed ratio means every recorded alpha is that ratio
    assert np.all(a.alphas[("0.3", 0)] == 0.3)


def test_mean_and_std_across_seeds(data):
    res = run_grid(AblationGrid("steps", (2,), BASE, seeds=(0, 1, 2)), data)
    xs = res.scores(2)
    assert len(xs) == 3
    assert res.mean(2) == pytest.approx(sum(xs) / 3, abs=1e-15)
    m = sum(xs) / 3
    assert res.std(2) == pytest.approx(math.sqrt(sum((x - m) ** 2 for x in xs) / 3), abs=1e-15)


def test_failed_cells_raise_with_partial_results(monkeypatch, data):
    real = ablation.train_run

    def flaky(cfg, *a, **k):
        if cfg.seed == 1:
            raise FloatingPointError("boom")
        return real(cfg, *a, **k)

    monkeypatch.setattr(ablation, "train_run", flaky)
    with pytest.raises(AblationError) as info:
        run_grid(AblationGrid("steps", (2,), BASE, seeds=(0, 1)), data)
    err = info.value
    assert list(err.failed) == [(2, 1)] and "boom" in err.failed[(2, 1)]
    assert list(err.partial.cells) == [(2, 0)]


def test_csv_and_table(tmp_path, data):
    res = run_grid(AblationGrid("alpha_mode", ("0.5", "dynamic"), BASE, seeds=(0, 1)), data)
    path = tmp_path / "grid.csv"
    write_csv(res, path)
    rows = list(csv.DictReader(path.open()))
    assert [(r["value"], r["seed"]) for r in rows] == [
        ("0.5", "0"), ("0.5", "1"), ("dynamic", "0"), ("dynamic", "1"),
        ("0.5", "mean"), ("0.5", "std"), ("dynamic", "mean"), ("dynamic", "std"),
    ]
    assert float(rows[4]["heldout_recall_at_1"]) == pytest.approx(res.mean("0.5"), abs=1e-6)
    lines = render_table(res).splitlines()
    assert lines[1].split() == ["alpha", "0.5", "Dynamic"]
    assert lines[3].split() == ["Recall", f"{100 * res.mean('0.5'):.2f}", f"{100 * res.mean('dynamic'):.2f}"]
    assert lines[4].split()[0] == "+/-"


def test_flow_mode_comparison(data):
    cmp = flow_mode_comparison(BASE, fixed_values=(0.1, 0.7), seeds=(0,), dataset=data)
    assert cmp.result.values == ("0.1", "0.7", "dynamic")
    assert cmp.alpha_in_range
    a = cmp.result.alphas[("dynamic", 0)]
    assert a.shape[1] == BASE.agot.Z and np.all((a > 0) & (a < 1))
    assert cmp.best_fixed_mean == max(cmp.result.mean("0.1"), cmp.result.mean("0.7"))
    assert "Dynamic" in cmp.table
    with pytest.raises(ConfigError):
        flow_mode_comparison(BASE, fixed_values=(1.0,), seeds=(0,), dataset=data)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_r1_equivalence(seed):
    rep = equivalence_check_r1(seed=seed)
    assert rep.n_inputs == 100
    assert rep.max_abs_diff < 1e-12 and rep.max_abs_diff_after_step < 1e-12
    assert rep.passed


def test_r1_equivalence_requires_one_subnode():
    with pytest.raises(ConfigError):
        equivalence_check_r1(AgotConfig(Z=3, R=2))


def test_negative_control_detects_difference():
    rep = negative_control_r2()
    assert not rep.passed and rep.max_abs_diff > 1e-3


def test_head_axis_grid(data):
    res = run_grid(AblationGrid("head", (HeadKind.COOP, HeadKind.COTPT), BASE, seeds=(0,)), data)
    assert set(res.cells) == {(HeadKind.COOP, 0), (HeadKind.COTPT, 0)}
    assert (HeadKind.COTPT, 0) in res.alphas and (HeadKind.COOP, 0) not in res.alphas
    assert render_table(res).splitlines()[1].split() == ["Head", "coop", "cotpt"]


def test_trend_lines():
    res = ablation.AblationResult("alpha_mode", ("0.1", "0.5", "dynamic"), (0,))
    for v, r in (("0.1", 0.70), ("0.5", 0.80), ("dynamic", 0.795)):
        res.cells[(v, 0)] = ablation.MetricReport(recall_at_1=r, accuracy=r, loss=0.0)
    assert trend_line(res) == ("dynamic 79.50 vs best fixed alpha=0.5 80.00; "
                               "dynamic within one point of best fixed: yes")
    res.cells[("dynamic", 0)] = ablation.MetricReport(recall_at_1=0.78, accuracy=0.78, loss=0.0)
    assert trend_line(res).endswith("no")
    steps = ablation.AblationResult("steps", (2, 3, 4), (0,))
    for v, r in ((2, 0.6), (3, 0.9), (4, 0.8)):
        steps.cells[(v, 0)] = ablation.MetricReport(recall_at_1=r, accuracy=r, loss=0.0)
    assert trend_line(steps) == "best Steps=3 (90.00); Steps=2: 60.00, Steps=4: 80.00"
