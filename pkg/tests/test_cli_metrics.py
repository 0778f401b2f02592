import dataclasses
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from unisa import cli
from unisa import losses as L
from unisa.config import default_config, parse_config, parse_text
from unisa.errors import EmptyPredictions, InvalidConfig, LengthMismatch, ParseError, ValidationError
from unisa.experiment import ABLATIONS, scaling_benchmark
from unisa.metrics import fit_linear, metrics_payload, read_sessions_csv, report, session_accuracy, summarize
from unisa.oracles import derived_values
from unisa.trainer import SGD, Ablation, Rngs, SessionMetrics, SessionState, TrainConfig, base_step, fewshot_step
from unisa.clustering import kmeans
from unisa.data import generate_blobs
from unisa.model import NetworkShape, init_state, represent, snapshot_anchor

TINY = """
[dataset]
n_classes = 8
dim = 6
samples_per_class = 20
[split]
base_classes = 4
ways = 2
shots = 3
n_fewshot_tasks = 2
anchor_budget_base = 8
[network]
hidden_dims = 8
feature_dim = 6
projected_dim = 4
[train]
epochs_base = 1
epochs_fewshot = 1
kmeans_restarts_base = 1
kmeans_restarts_fewshot = 1
"""


def write(tmp_path, text, name="c.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


def fake_run(seed, accs):
    return SessionMetrics(list(accs), [0.1] * len(accs), 0.9, seed, 0, [10] * len(accs))


# --- config -----------------------------------------------------------------

def test_empty_config_gives_defaults(tmp_path):
    cfg = parse_config(write(tmp_path, ""))
    assert cfg.train.bound_b == 0.01 and cfg.train.m_perturbations == 2 and cfg.train.weights.lambda4 == 0.1
    assert cfg == default_config()


def test_config_errors(tmp_path):
    with pytest.raises(ValidationError) as err:
        parse_config(write(tmp_path, "bound_b = -1\n"))
    assert err.value.field == "bound_b"
    with pytest.raises(ParseError) as err:
        parse_config(write(tmp_path, "# header\n\nunknown_key = 3\n"))
    assert err.value.line == 3
    with pytest.raises(ParseError):
        parse_text("[train]\ntau = 0.1\n")
    with pytest.raises(ParseError):
        parse_text("lr_base = 0.1\nlr_base = 0.2\n")
    with pytest.raises(ParseError):
        parse_text("[nowhere]\n")
    with pytest.raises(ParseError):
        parse_text("just words\n")
    with pytest.raises(ValidationError) as err:
        parse_text("epochs_base = many\n")
    assert err.value.field == "epochs_base"


def test_config_values_and_ablation_flags(tmp_path):
    cfg = parse_config(write(tmp_path, "[loss]\ntau = 0.2 ; inline\n[ablation]\ndisable_ball = yes\n[run]\nseeds = 3, 4\n"))
    assert cfg.train.weights.tau == 0.2 and cfg.train.ablation == Ablation(disable_ball=True)
    assert cfg.seeds == (3, 4)
    flags = {f for a in ABLATIONS.values() for f, v in dataclasses.asdict(a).items() if v}
    assert flags == {"disable_flat", "disable_wide_kl", "disable_psl", "disable_psa", "disable_ball"}


# --- metrics -----------------------------------------------------------------

def test_session_accuracy_examples():
    assert session_accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert session_accuracy([1, 2, 3], [0, 0, 0]) == 0.0
    assert session_accuracy([1, 1, 1, 2, 2, 2], [1, 0, 1, 2, 0, 0]) == 0.5
    with pytest.raises(LengthMismatch):
        session_accuracy([1], [1, 2])
    with pytest.raises(EmptyPredictions):
        session_accuracy([], [])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=6))
def test_average_is_mean(accs):
    m = fake_run(0, accs)
    assert abs(m.average - sum(accs) / len(accs)) < 1e-12


def test_report_std_and_means(tmp_path):
    report({"one": [fake_run(0, [0.5, 0.25])]}, tmp_path / "a")
    rows = read_sessions_csv(tmp_path / "a" / "sessions.csv")
    assert all(std == 0.0 for _, std in rows["one"].values())
    same = [fake_run(0, [0.8, 0.6]), fake_run(1, [0.8, 0.6])]
    report({"twin": same}, tmp_path / "b")
    rows = read_sessions_csv(tmp_path / "b" / "sessions.csv")
    assert rows["twin"]["session_1"] == (80.0, 0.0) and rows["twin"]["avg"] == (70.0, 0.0)


def test_csv_means_match_json(tmp_path, rng):
    runs = {"full": [fake_run(s, rng.uniform(0, 1, 4)) for s in range(5)],
            "other": [fake_run(s, rng.uniform(0, 1, 4)) for s in range(5)]}
    report(runs, tmp_path, {"k": 1}, reference="full")
    payload = json.loads((tmp_path / "metrics.json").read_text())
    rows = read_sessions_csv(tmp_path / "sessions.csv")
    for name, m in payload["methods"].items():
        per_run = [r["accuracies"] for r in m["runs"]]
        for k in range(4):
            mean = sum(100 * acc[k] for acc in per_run) / len(per_run)
            assert abs(rows[name][f"session_{k + 1}"][0] - mean) <= 0.005 + 1e-9
        avg = sum(100 * r["average"] for r in m["runs"]) / len(m["runs"])
        assert abs(rows[name]["avg"][0] - avg) <= 0.005 + 1e-9
    header = (tmp_path / "sessions.csv").read_text().splitlines()[0]
    assert header.endswith("gap_vs_full")
    assert "seconds" not in (tmp_path / "metrics.json").read_text()


def test_fit_linear_identity():
    slope, intercept, r2 = fit_linear([1000, 2000, 4000, 8000], [0.5 + 2e-3 * n for n in (1000, 2000, 4000, 8000)])
    assert slope == pytest.approx(2e-3) and intercept == pytest.approx(0.5) and r2 == pytest.approx(1.0)


def test_scaling_preconditions():
    cfg = default_config()
    with pytest.raises(InvalidConfig):
        scaling_benchmark(cfg, [1000, 1000, 2000])
    with pytest.raises(InvalidConfig):
        scaling_benchmark(cfg, [1000, 2000])


# --- ablation flags remove exactly their term ----------------------------------

def _setup(seed=0):
    shape = NetworkShape(input_dim=6, hidden_dims=(8,), feature_dim=6, projected_dim=4)
    state = init_state(shape, seed=seed)
    d = generate_blobs(3, 6, 12, 6.0, 1.0, seed)
    _, labels = kmeans(represent(state, d.x), 3, seed=0)
    return state, d.x, labels


@pytest.mark.parametrize("flag,term", [("disable_psl", "psl"), ("disable_psa", "psa"),
                                       ("disable_wide_kl", "kl"), ("disable_flat", "drift")])
def test_base_flag_removes_term(flag, term):
    state, x, labels = _setup()
    cfg = TrainConfig(ablation=Ablation(**{flag: True}))
    rep = base_step(state, x, labels, 3, cfg, Rngs(0), SGD(), np.zeros(6), 0.0)
    assert getattr(rep, term) == 0.0
    w = cfg.weights
    assert rep.total == pytest.approx(rep.psl + w.lambda1 * rep.psa + w.lambda2 * rep.kl + w.lambda3 * rep.drift,
                                      abs=1e-9)
    full = base_step(_setup()[0], x, labels, 3, TrainConfig(), Rngs(0), SGD(), np.zeros(6), 0.0)
    assert getattr(full, term) != 0.0


@pytest.mark.parametrize("flag,term", [("disable_ball", "ball"), ("disable_mas", "mas"), ("disable_psl", "psl")])
def test_fewshot_flag_removes_term(flag, term):
    def step(ablation):
        state, x, labels = _setup(1)
        snapshot_anchor(state)
        state.gamma = {k: np.ones_like(v) for k, v in state.theta().items()}
        state.theta_prev = {k: v + 0.1 for k, v in state.theta().items()}
        clusters, labels = kmeans(represent(state, x), 3, seed=0)
        return fewshot_step(SessionState(state), x, labels, clusters, TrainConfig(ablation=ablation), Rngs(0),
                            SGD(), np.zeros(6), 0.0)

    rep = step(Ablation(**{flag: True}))
    w = TrainConfig().weights
    assert getattr(rep, term) == 0.0
    assert rep.total == pytest.approx(rep.psl + w.lambda1 * rep.psa + w.lambda2 * rep.kl + w.lambda4 * rep.ball
                                      + rep.mas, abs=1e-9)
    assert getattr(step(Ablation()), term) != 0.0


# --- cli ---------------------------------------------------------------------

def test_cli_run_writes_outputs(tmp_path, capsys):
    cfg = write(tmp_path, TINY)
    out = tmp_path / "out"
    code = cli.main(["run", "--config", str(cfg), "--seed", "1", "--seed", "2", "--out", str(out), "--shots", "2"])
    assert code == 0
    payload = json.loads((out / "metrics.json").read_text())
    assert payload["methods"]["full"]["seeds"] == [1, 2]
    assert payload["config"]["split"]["shots"] == 2
    assert (out / "sessions.csv").exists() and (out / "runlog.jsonl").stat().st_size > 0
    assert "full" in capsys.readouterr().out


def test_cli_ablate(tmp_path):
    out = tmp_path / "abl"
    assert cli.main(["ablate", "--config", str(write(tmp_path, TINY)), "--out", str(out)]) == 0
    rows = read_sessions_csv(out / "sessions.csv")
    assert set(rows) == {"full", *ABLATIONS, "frozen"}


def test_cli_bench(tmp_path):
    out = tmp_path / "bench"
    code = cli.main(["bench", "--config", str(write(tmp_path, TINY)), "--out", str(out),
                     "--sizes", "80", "160", "320", "--epochs", "1"])
    assert code == 0
    res = json.loads((out / "bench.json").read_text())
    assert res["sizes"] == [80, 160, 320] and len(res["seconds"]) == 3


def test_cli_errors(tmp_path, capsys):
    assert cli.main(["run", "--config", str(write(tmp_path, "bound_b = -1\n"))]) == 2
    assert "bound_b" in capsys.readouterr().err
    assert cli.main(["bench", "--sizes", "10", "5", "20"]) == 2


def test_cli_nonzero_exit_on_violation(tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "run_seeds", lambda cfg, seeds, log: [dataclasses.replace(fake_run(0, [1.0]),
                                                                                           clamp_violations=1)])
    assert cli.main(["run", "--out", str(tmp_path / "v")]) == 1


def test_cli_oracle_prints_frozen_values(capsys):
    assert cli.main(["oracle"]) == 0
    values = json.loads(capsys.readouterr().out)
    assert values == derived_values(0)


def test_frozen_oracle_values():
    v = derived_values(0)
    assert v["info_nce.aligned_one_orthogonal_negative"] == pytest.approx(-1.0)
    assert v["info_nce.all_orthogonal"] == pytest.approx(0.0)
    assert v["psl.identical_prototypes"] == pytest.approx(0.0)
    assert v["psl.orthogonal_prototypes"] == pytest.approx(-1.0)
    assert v["kl.half_half_zero_zero"] == pytest.approx(math.log(2))
    assert v["mas.scalar_gamma"] == 2.0
    assert v["kmeans.four_points.inertia"] == pytest.approx(1.0)
    assert (v["kmeans.four_points.c0_y"], v["kmeans.four_points.c1_x"]) == (0.5, 10.0)
    assert v["ball.fraction_within_half_radius_d2"] == 0.25
    assert v["augment.half_normal_mean_sigma_0.1"] == pytest.approx(0.0798, abs=5e-5)
    assert v["blobs.sep10_nearest_mean_accuracy"] >= 0.99


def test_parallel_seeds_match_sequential(tmp_path, monkeypatch):
    cfg = write(tmp_path, TINY)
    outs = {}
    for threads in ("1", "2"):
        monkeypatch.setenv("UNISA_THREADS", threads)
        out = tmp_path / f"t{threads}"
        assert cli.main(["run", "--config", str(cfg), "--seed", "0", "--seed", "1", "--out", str(out)]) == 0
        log = [json.loads(line) for line in (out / "runlog.jsonl").read_text().splitlines()]
        for rec in log:
            rec.pop("seconds", None)  # wall time is the only thing allowed to differ
        outs[threads] = ((out / "metrics.json").read_bytes(), log)
    assert outs["1"] == outs["2"]
