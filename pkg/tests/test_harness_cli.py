import json
import xml.dom.minidom
from dataclasses import replace

import numpy as np
import pytest

from group_rlvr import cli, verify
from group_rlvr.config import (ConfigError, DynamicsConfig, ExperimentConfig, dump_config, load_config,
                               parse_config, preset)
from group_rlvr.groups import group_from_name
from group_rlvr.harness import (MetricsParseError, analyze_run, cmd_analyze, cmd_gen, cmd_scan, cmd_train,
                                read_metrics, thread_cap)
from group_rlvr.svgplot import line_chart
from group_rlvr.tasks import new_position_space, read_corpus, validate_instance
from group_rlvr.train import TrainConfig

TINY_TRAIN = TrainConfig(lr=5.0, batch_size=64, iterations=6, eval_every=3, eval_batches=1, eval_batch_size=64)


def tiny_config(**kw):
    base = dict(group="Z12", dpos=16, C_B=3.0, length_mode="fixed", lengths=(3, 5), train=TINY_TRAIN)
    base.update(kw)
    return ExperimentConfig(**base).validate()


# ---------------------------------------------------------------------------
# configuration


def test_presets_encode_the_protocol():
    fig4, fig5a, fig5b = preset("fig4"), preset("fig5a"), preset("fig5b")
    assert fig4.runs() == [(5,), (15,), (45,)]
    assert fig5a.runs() == [(5, 15, 45)]
    assert fig5b.runs() == [(5, 35)]
    for cfg in (fig4, fig5a, fig5b):
        assert cfg.group == "Z96" and cfg.train.batch_size == 512
        assert cfg.train.ema_momentum == 0.95 and cfg.train.entropy_coef == 1e-3
    with pytest.raises(ConfigError):
        preset("fig6")


def test_parse_config_sections():
    cfg = parse_config("""
[experiment]
group = S4
dpos = 16
C_B = 4
trainer = rl

[lengths]
mode = mixed
values = 3, 5

[train]
lr = 2.5
iterations = 10
eval_mode = sample

[dynamics]
ratios = 2, 3
""")
    assert cfg.group == "S4" and cfg.dpos == 16 and cfg.C_B == 4.0
    assert cfg.runs() == [(3, 5)]
    assert cfg.train.lr == 2.5 and cfg.train.iterations == 10 and cfg.train.eval_mode == "sample"
    assert cfg.dynamics.ratios == (2.0, 3.0)


def test_ratio_mode_lengths():
    cfg = parse_config("[lengths]\nmode = ratio\nratio = 3\nL1 = 5\nL_max = 45\n")
    assert cfg.resolved_lengths() == [5, 15, 45]


@pytest.mark.parametrize("text", [
    "[experiment]\ngroup = Q8\n",
    "[experiment]\ncolour = red\n",
    "[lengths]\nvalues = 5, 70\n",
    "[train]\nlr = fast\n",
    "[extras]\nx = 1\n",
    "not a config",
    "[experiment]\ntrainer = ppo\n",
    "[lengths]\nmode = ratio\n",
])
def test_bad_configs_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_dump_and_parse_round_trip():
    for name in ("fig4", "fig5a", "fig5b"):
        cfg = preset(name)
        back = parse_config(dump_config(cfg))
        assert back.config_hash() == cfg.config_hash()


def test_hash_tracks_semantic_fields_only():
    cfg = tiny_config()
    assert replace(cfg, out="elsewhere").config_hash() == cfg.config_hash()
    assert replace(cfg, dpos=32).config_hash() != cfg.config_hash()
    assert replace(cfg, train=replace(cfg.train, lr=6.0)).config_hash() != cfg.config_hash()
    assert replace(cfg, dynamics=DynamicsConfig(lr=1.0)).config_hash() != cfg.config_hash()
    assert replace(cfg, seed=1).config_hash() != cfg.config_hash()


def test_hash_ignores_key_order(tmp_path):
    a = parse_config("[experiment]\ngroup = S4\ndpos = 16\n[lengths]\nvalues = 3\n")
    b = parse_config("[lengths]\nvalues = 3\n[experiment]\ndpos = 16\ngroup = S4\n")
    assert a.config_hash() == b.config_hash()


def test_missing_config_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/config.ini")


# ---------------------------------------------------------------------------
# gen, train, analyze, scan


def test_gen_is_deterministic_and_valid(tmp_path):
    cfg = ExperimentConfig(group="Z96", lengths=(5,)).validate()
    a = cmd_gen(cfg, 10_000, tmp_path / "a")
    b = cmd_gen(cfg, 10_000, tmp_path / "b")
    assert a.read_bytes() == b.read_bytes()
    header, insts = read_corpus(a)
    assert header["count"] == 10_000 and len(insts) == 10_000
    G, space = group_from_name("Z96"), new_position_space(64, cfg.position_seed)
    assert all(not validate_instance(inst, G, space) for inst in insts)


def test_gen_zero_count(tmp_path):
    path = cmd_gen(tiny_config(), 0, tmp_path)
    lines = path.read_text().splitlines()
    assert len(lines) == 1 and "header" in json.loads(lines[0])


def test_train_outputs_are_reproducible(tmp_path):
    cfg = tiny_config()
    cmd_train(cfg, tmp_path / "a")
    cmd_train(cfg, tmp_path / "b")
    for name in ("metrics.jsonl", "success.svg", "hit_rate.svg", "checkpoint_L3.json", "checkpoint_L5.json",
                 "config.ini"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["config_hash"] == cfg.config_hash()
    keys = {tuple(sorted(json.loads(line))) for line in (tmp_path / "a" / "metrics.jsonl").read_text().splitlines()}
    assert len(keys) == 1


def test_train_svg_has_one_curve_per_length(tmp_path):
    cmd_train(tiny_config(), tmp_path)
    doc = xml.dom.minidom.parse(str(tmp_path / "success.svg"))
    assert len(doc.getElementsByTagName("polyline")) == 2


def test_reduced_dynamics_trainer(tmp_path):
    cfg = tiny_config(group="D12", trainer="reduced-dynamics", length_mode="mixed", lengths=(2, 8), C_B=4.0,
                      dynamics=DynamicsConfig(lr=20.0, steps=50, q0=0.0, mc_instances=4))
    timelines = cmd_train(cfg, tmp_path)
    assert (tmp_path / "timeline_L2-8.csv").exists() and (tmp_path / "reward.svg").exists()
    assert timelines["L2-8"].t.size == 51


def test_analyze_mastered_and_truncated(tmp_path):
    recs = [{"run": "x", "iteration": t, "order": 96, "success": {"5": s5, "15": s15},
             "hit_rate": {"5": 0.0, "15": 0.0}, "q_mean": 0.0, "r_mean": 0.0}
            for t, s5, s15 in [(0, 0.01, 0.01), (10, 0.5, 0.01), (20, 1.0, 0.02), (30, 1.0, 0.5), (40, 1.0, 1.0)]]
    full = analyze_run("x", recs)
    assert full.timeline.t_mas == {5: 20, 15: 40}
    cut = analyze_run("x", recs[:3])
    assert cut.timeline.t_mas[15] is None
    assert "run x" in cut.text()


def test_analyze_reports_bad_lines(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text('{"run": "a", "iteration": 0, "order": 6, "success": {}, "hit_rate": {}, '
                    '"q_mean": 0, "r_mean": 0}\n{broken\n')
    with pytest.raises(MetricsParseError, match=":2:"):
        read_metrics(path)
    path.write_text('{"run": "a"}\n')
    with pytest.raises(MetricsParseError, match="missing keys"):
        read_metrics(path)


def test_analyze_round_trip_from_train(tmp_path):
    cmd_train(tiny_config(), tmp_path)
    analyses = cmd_analyze([tmp_path / "metrics.jsonl"])
    assert [a.run for a in analyses] == ["L3", "L5"]


def test_scan_small_grid(tmp_path):
    cfg = tiny_config(group="D12", C_B=4.0, L1=2, L_max=8,
                      dynamics=DynamicsConfig(lr=20.0, steps=600, q0=0.0, mc_instances=4, ratios=(2.0,)))
    reports = cmd_scan(cfg, tmp_path)
    assert len(reports) == 1 and reports[0].label == "relay"
    rows = (tmp_path / "scan.csv").read_text().splitlines()
    assert rows[0] == "R,horizons,max_plateau,max_rise,label" and len(rows) == 2
    assert (tmp_path / "plateau.svg").exists() and (tmp_path / "timeline_R2.csv").exists()


def test_scan_empty_grid(tmp_path):
    cfg = tiny_config(dynamics=DynamicsConfig(ratios=()))
    with pytest.raises(ConfigError):
        cmd_scan(cfg, tmp_path)


# ---------------------------------------------------------------------------
# plotting


def test_svg_is_deterministic_and_well_formed():
    series = {"L=5": ([0, 1, 2], [0.0, 0.5, 1.0]), "L=45": ([0, 1, 2], [0.0, 0.0, 0.01])}
    a = line_chart(series, title="success", ylim=(0, 1))
    assert a == line_chart(series, title="success", ylim=(0, 1))
    doc = xml.dom.minidom.parseString(a)
    assert len(doc.getElementsByTagName("polyline")) == 2
    assert "L=45" in a


# ---------------------------------------------------------------------------
# command line


def test_cli_exit_codes(tmp_path, monkeypatch, capsys):
    assert cli.main(["gen", "--preset", "fig4", "--count", "3", "--out", str(tmp_path / "g")]) == 0
    bad = tmp_path / "bad.ini"
    bad.write_text("[experiment]\ngroup = Q8\n")
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "t")]) == 2
    broken = tmp_path / "m.jsonl"
    broken.write_text("{oops\n")
    assert cli.main(["analyze", str(broken)]) == 2
    monkeypatch.setenv("GROUP_RLVR_THREADS", "zero")
    assert cli.main(["gen", "--count", "1", "--out", str(tmp_path / "g2")]) == 2
    monkeypatch.delenv("GROUP_RLVR_THREADS")
    assert "error" in capsys.readouterr().err


def test_cli_instability_exit_code(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[experiment]\ngroup = D12\nC_B = 3\ndpos = 16\ntrainer = reduced-dynamics\n"
                   "[lengths]\nmode = mixed\nvalues = 2\n[dynamics]\nlr = 1e7\nsteps = 20\nq0 = 0\n"
                   "mc_instances = 4\n")
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 4
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert manifest["status"] == "instability"
    assert (tmp_path / "run" / "timeline_L2.csv").exists()


def test_cli_seed_override(tmp_path):
    cli.main(["gen", "--preset", "fig4", "--count", "5", "--seed", "3", "--out", str(tmp_path / "a")])
    header, _ = read_corpus(tmp_path / "a" / "instances.jsonl")
    assert header["seed"] == 3


def test_thread_cap(monkeypatch):
    monkeypatch.delenv("GROUP_RLVR_THREADS", raising=False)
    assert thread_cap() is None
    monkeypatch.setenv("GROUP_RLVR_THREADS", "2")
    assert thread_cap() == 2
    monkeypatch.setenv("GROUP_RLVR_THREADS", "0")
    with pytest.raises(ConfigError):
        thread_cap()


def test_fast_verification_passes(capsys):
    assert cli.main(["verify", "--level", "fast"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "PASS" in out


def test_verification_catches_misaligned_answers(monkeypatch):
    real = verify.sample_batch

    def shifted(*args, **kwargs):
        batch = real(*args, **kwargs)
        batch.answers[:, 0] = (batch.answers[:, 0] + 1) % args[1].dpos
        return batch

    monkeypatch.setattr(verify, "sample_batch", shifted)
    ok, detail = verify.check_instances(n=20)
    assert not ok and "aligned" in detail
    assert cli.main(["verify"]) == 3


def test_scan_endpoints_must_fit_the_group(tmp_path):
    cfg = tiny_config(group="D12", dynamics=DynamicsConfig(ratios=(3.0,)))
    with pytest.raises(ConfigError, match="L_max=45"):
        cmd_scan(cfg, tmp_path)


def test_inline_comments_are_ignored():
    cfg = parse_config("[experiment]\ngroup = D48   # dihedral\n[train]\neval_mode = sample  # sampled rollouts\n")
    assert cfg.group == "D48" and cfg.train.eval_mode == "sample"
