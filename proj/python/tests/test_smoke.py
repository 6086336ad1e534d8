import numpy as np
import pytest

import switchsim as sw


def tiny(tmp_path, **extra):
    cfg = {
        "run.output_dir": str(tmp_path / "run"),
        "run.seed": 3,
        "model.vocab": 16,
        "model.d_model": 8,
        "model.d_ff": 12,
        "model.seq_len": 8,
        "model.num_experts": 2,
        "train.steps": 4,
        "train.batch": 4,
        "train.eval_sequences": 8,
    }
    cfg.update(extra)
    return cfg


def test_expert_capacity():
    assert sw.expert_capacity(64, 4, 1.0) == 16
    assert sw.expert_capacity(64, 4, 1.25) == 20


def test_load_balance_uniform_gives_alpha():
    n = 4
    probs = np.full((n, n), 1.0 / n)
    out = sw.load_balance_loss(probs, np.eye(n), 0.01)
    assert out["loss"] == pytest.approx(0.01, abs=1e-12)
    assert out["grad_probs"].shape == (n, n)


def test_route_respects_capacity():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (32, 8)).astype(np.float32)
    w = rng.uniform(-2, 2, (8, 4)).astype(np.float32)
    cfg = sw.RouterConfig()
    cfg.num_experts = 4
    cfg.capacity_factor = 1.0
    cfg.policy = "argmax"
    r = sw.route(x, w, cfg)
    assert r["expert_capacity"] == 8
    loads = np.bincount([e for e, d in zip(r["expert_index"], r["dropped"]) if not d], minlength=4)
    assert loads.max() <= 8
    assert r["router_probs"].shape == (32, 4)
    assert r["dropped_fraction"] == pytest.approx(sum(r["dropped"]) / 32)


def test_switch_layer_and_top1_agree():
    params = sw.init_switch_params(8, 16, 4, scale=1.0, seed=1)
    assert params.num_experts == 4
    x = np.random.default_rng(1).uniform(-1, 1, (24, 8)).astype(np.float32)
    cfg = sw.RouterConfig()
    cfg.num_experts = 4
    a = sw.switch_ffn(x, params, cfg, seed=5)
    b = sw.moe_topk_ffn(x, params, 1, cfg, seed=5)
    assert a["y"].shape == (24, 8)
    np.testing.assert_array_equal(a["y"], b["y"])


def test_bf16_round_ties_to_even():
    v = np.array([1.0 + 2.0**-8, 1.0 + 3 * 2.0**-8, np.inf], dtype=np.float32)
    np.testing.assert_array_equal(sw.bf16_round(v), [1.0, 1.0 + 2.0**-6, np.inf])


def test_config_round_trip_and_errors():
    cfg = sw.build_config({"router.alpha": 0.02}, router__ntlb_stages=1)
    assert cfg["router.alpha"] == "0.02"
    assert cfg["router.ntlb_stages"] == "1"
    assert sw.parse_config(sw.serialize_config(cfg)) == cfg
    with pytest.raises(ValueError, match="unknown config key"):
        sw.build_config({"router.nope": 1})


def test_trainer_steps(tmp_path):
    t = sw.Trainer(tiny(tmp_path))
    rows = t.run(3)
    assert [r["step"] for r in rows] == [1, 2, 3]
    assert rows[-1]["loss"] == pytest.approx(rows[-1]["cross_entropy"] + rows[-1]["aux_loss"])
    assert len(t.evaluate()["f"]) == 2
    assert "embedding" in t.parameters()


def test_run_experiment_writes_artifacts(tmp_path):
    res = sw.run_experiment(tiny(tmp_path))
    assert res["exit_code"] == 0
    out = tmp_path / "run"
    for name in ("metrics.csv", "eval.csv", "checkpoint.bin", "config.txt"):
        assert (out / name).exists()
    lines = (out / "metrics.csv").read_text().splitlines()
    assert len(lines) == 5


def test_cli_grad_check_and_comm_report(tmp_path):
    code, out, err = sw.run_cli(["grad-check"])
    assert code == 0, err
    assert out.count("PASS") == len(sw.grad_check())
    csv = sw.comm_report(tiny(tmp_path, **{"parallel.n": 2, "parallel.strategy": "expert+data"}))
    assert csv.splitlines()[0] == "strategy,n,m,E,C,op,pass,bytes"


def test_parallel_check(tmp_path):
    rows = sw.parallel_check(tiny(tmp_path, **{"parallel.n": 2, "parallel.m": 2}), ["data", "expert+model+data"])
    assert all(r["passed"] for r in rows)
