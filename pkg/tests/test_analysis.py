import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hapfuse.agent import ExpertAgent
from hapfuse.analysis import (CABINET_WEIGHTS, EvalReport, MIReport, cabinet_score,
                              generalization_suite, latch_score, mi_suite, poured_amount,
                              pour_metric, read_eval_tsv, run_eval, trial_seeds, write_eval_tsv,
                              write_mi_tsv)
from hapfuse.config import RunConfig
from hapfuse.mutual_info import (DegenerateSamples, estimate_mi, gaussian_mi, ksg_mi,
                                 pca_reduce)
from hapfuse.world import (LATCH_HIDDEN_FIELDS, POUR_HIDDEN_FIELDS, make_world, run_episode)


def pour_episode(fill, spilled=False, height=0.10):
    cfg = RunConfig().world
    ep = run_episode(make_world(cfg, 0), max_steps=0)
    ep.final_hidden = ep.final_hidden.copy()
    ep.final_hidden[POUR_HIDDEN_FIELDS.index("fill_level")] = fill
    ep.final_hidden[POUR_HIDDEN_FIELDS.index("spilled")] = float(spilled)
    ep.container_params = dict(ep.container_params, height=height)
    return ep


# ---------------------------------------------------------------- metrics


def test_pour_metric_examples():
    assert pour_metric(pour_episode(1.0)) == 0.0
    assert pour_metric(pour_episode(0.0)) == pytest.approx(0.10)
    assert pour_metric(pour_episode(0.6)) == pytest.approx(0.04)
    assert pour_metric(pour_episode(0.9, spilled=True)) == pytest.approx(0.10)


def test_poured_amount():
    ep = pour_episode(0.8)
    assert poured_amount(ep) == pytest.approx(0.8 - ep.meta["initial_fill"])


def test_cabinet_score_examples():
    assert CABINET_WEIGHTS == (0.3, 0.3, 0.4)
    assert cabinet_score(0, 0, 0) == 0.0
    assert cabinet_score(1, 1, 1) == pytest.approx(1.0, abs=1e-12)
    assert cabinet_score(2.0, 0.0, 5.0) == pytest.approx(2.6, abs=1e-12)
    with pytest.raises(ValueError):
        cabinet_score(-0.1, 0, 0)
    with pytest.raises(ValueError):
        cabinet_score(0, float("nan"), 0)


@settings(max_examples=60, deadline=None)
@given(st.tuples(*[st.integers(0, 1000)] * 3), st.integers(0, 64))
def test_cabinet_score_homogeneous(x, c):
    # dyadic inputs keep every product exact in binary floating point
    x = [v / 8 for v in x]
    c = c / 4
    weights = (0.25, 0.5, 0.125)
    assert cabinet_score(*[c * v for v in x], *weights) == c * cabinet_score(*x, *weights)


def test_latch_score_mapping():
    cfg = RunConfig().with_(world={"task": "latch"})
    ep = run_episode(make_world(cfg.world, 0), max_steps=0)
    ep.final_hidden = np.zeros(len(LATCH_HIDDEN_FIELDS))
    assert latch_score(ep) == pytest.approx(0.3)
    ep.final_hidden[LATCH_HIDDEN_FIELDS.index("door_position")] = 1.0
    assert latch_score(ep) == 0.0
    with pytest.raises(ValueError, match="latch"):
        latch_score(pour_episode(0.5))
    with pytest.raises(ValueError, match="pour"):
        pour_metric(ep)


def test_latch_expert_scores_low():
    cfg = RunConfig().with_(world={"task": "latch"})
    report = run_eval(ExpertAgent(cfg), cfg.world, n_trials=4)
    assert report.mean < 0.05


# ---------------------------------------------------------------- reports


def test_eval_report_consistency(tmp_path):
    cfg = RunConfig()
    report = run_eval(ExpertAgent(cfg), cfg.world, n_trials=3)
    assert report.check() and report.n_trials == 3 == len(report.seeds)
    assert report.std == pytest.approx(float(np.std(report.values)), abs=1e-9)
    assert EvalReport.from_dict(report.to_dict()) == report
    write_eval_tsv(tmp_path / "r.tsv", [report])
    row = read_eval_tsv(tmp_path / "r.tsv")[0]
    assert row["method"] == "expert" and int(row["n_trials"]) == 3
    again = run_eval(ExpertAgent(cfg), cfg.world, seeds=report.seeds)
    assert again.values == report.values


def test_single_trial_and_repeated_seed():
    cfg = RunConfig()
    one = run_eval(ExpertAgent(cfg), cfg.world, n_trials=1)
    assert one.std == 0.0
    same = run_eval(ExpertAgent(cfg), cfg.world, seeds=[7, 7])
    assert same.values[0] == same.values[1]
    with pytest.raises(ValueError):
        trial_seeds(0, 0)
    with pytest.raises(ValueError, match="task"):
        run_eval(ExpertAgent(cfg), cfg.with_(world={"task": "latch"}).world, n_trials=1)


def test_generalization_table():
    cfg = RunConfig()
    assert generalization_suite(ExpertAgent(cfg), [], cfg) == []
    rows = generalization_suite(ExpertAgent(cfg), [0, 2], cfg, n_trials=2)
    base = run_eval(ExpertAgent(cfg), cfg.world, n_trials=2)
    assert rows[0].report.values == base.values and rows[0].degradation == 0.0
    assert rows[1].report.label == "variant=2"


# ---------------------------------------------------------------- mutual information


def gaussian_pair(rho, n, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    y = rho * x + math.sqrt(1 - rho * rho) * rng.standard_normal(n)
    return x, y


def test_gaussian_closed_form():
    assert gaussian_mi(0.9) == pytest.approx(0.8304, abs=1e-4)
    assert gaussian_mi(0.0) == 0.0


@pytest.mark.parametrize("seed", [0, 1])
def test_ksg_matches_gaussian_oracle(seed):
    x, y = gaussian_pair(0.9, 5000, seed)
    assert abs(estimate_mi(x[:, None], y, k=3, d_reduce=1) - gaussian_mi(0.9)) < 0.05


def test_independent_samples_near_zero():
    rng = np.random.default_rng(3)
    z = rng.standard_normal((5000, 6))
    y = rng.permutation(z[:, 0])
    assert abs(estimate_mi(z, y, k=3, d_reduce=4)) < 0.02


def test_raw_ksg_unclamped_near_zero():
    rng = np.random.default_rng(4)
    assert abs(ksg_mi(rng.standard_normal((3000, 1)), rng.standard_normal((3000, 1)))) < 0.03


def test_affine_invariance_of_y():
    x, y = gaussian_pair(0.7, 2000, 5)
    base = estimate_mi(x[:, None], y, 3, 1)
    assert abs(estimate_mi(x[:, None], -3.0 * y + 11.0, 3, 1) - base) < 0.03


def test_mi_grows_as_noise_shrinks():
    rng = np.random.default_rng(6)
    z = rng.standard_normal((2000, 4))
    values = [estimate_mi(z, 2.0 * z[:, 1] + s * rng.standard_normal(2000), 3, 4)
              for s in (1.0, 0.3, 0.05)]
    assert values[0] < values[1] < values[2]


def test_degenerate_inputs():
    z = np.random.default_rng(7).standard_normal((50, 3))
    with pytest.raises(DegenerateSamples):
        estimate_mi(z, np.ones(50))
    with pytest.raises(ValueError):
        estimate_mi(z[:5], np.arange(5.0))
    with pytest.raises(ValueError):
        estimate_mi(z, np.arange(49.0))
    assert estimate_mi(np.zeros((50, 3)), np.arange(50.0)) == 0.0


def test_pca_reduce_keeps_top_direction():
    rng = np.random.default_rng(8)
    z = np.outer(rng.standard_normal(400), [3.0, 4.0, 0.0]) + 0.01 * rng.standard_normal((400, 3))
    red = pca_reduce(z, 1)
    assert red.shape == (400, 1)
    assert abs(np.corrcoef(red[:, 0], z @ np.array([0.6, 0.8, 0.0]))[0, 1]) > 0.999


def test_mi_suite_marks_degenerate_rows_invalid(tmp_path):
    cfg = RunConfig().with_(mi={"n_rollouts": 2})

    class Constant(ExpertAgent):
        name = "constant"

        def plan(self, world, t, history, seed):
            chunk, _ = super().plan(world, t, history, seed)
            return chunk * 0.0, np.full(6, float(t))

    rows = mi_suite({"constant": Constant(cfg)}, cfg, n_rollouts=2)
    assert len(rows) == 1 and not rows[0].valid and math.isnan(rows[0].mi)
    write_mi_tsv(tmp_path / "mi.tsv", rows + [MIReport("x", 3, 8, 10, 0.1)])
    assert len((tmp_path / "mi.tsv").read_text().splitlines()) == 3
