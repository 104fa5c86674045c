"""End-to-end command-line runs against a small corpus."""

import hashlib
import json
from pathlib import Path

import pytest

from darl.cli import RunConfig, main

TINY_JSON = {
    "seed": 5,
    "corpus": {
        "dims": 8,
        "id_cluster_count": 3,
        "ood_cluster_count": 2,
        "train_size": 400,
        "val_size": 200,
        "test_size": 200,
        "pool_size": 1200,
        "pretrain_size": 150,
        "pretrain_extra_clusters": 2,
    },
    "plan": {
        "pretrain_epochs": 4,
        "lp_epochs": 6,
        "ft_epochs": 3,
        "batch_size": 32,
    },
    "trend_seeds": [5, 6],
    "budgets": [0.5, 1.0],
}


@pytest.fixture(scope="module")
def tiny_config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY_JSON), encoding="utf-8")
    return str(path)


@pytest.fixture(scope="module")
def pipeline_run(tiny_config_path, tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("run") / "r1"
    code = main(
        ["pipeline", "--config", tiny_config_path, "--run-dir", str(run_dir)]
    )
    assert code == 0
    return run_dir


def tree_hashes(root: Path) -> dict:
    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_file():
            out[str(path.relative_to(root))] = hashlib.sha256(
                path.read_bytes()
            ).hexdigest()
    return out


# ---------------------------------------------------------------------------
# defaults and config resolution


def test_run_defaults():
    config = RunConfig()
    assert config.alpha == 0.6
    assert config.seed == 7
    assert config.rho == 0.1
    assert config.policy.alpha_fpr == 0.12
    assert config.eval_fraction == 0.2


def test_print_config_round_trips(tiny_config_path, capsys):
    code = main(
        ["gen-data", "--config", tiny_config_path, "--seed", "9", "--print-config"]
    )
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["seed"] == 9
    assert payload["corpus"]["seed"] == 9
    assert payload["plan"]["seed"] == 9
    assert payload["corpus"]["dims"] == 8
    assert payload["trend_seeds"] == [5, 6]


def test_print_config_is_canonical(tiny_config_path, capsys):
    main(["gen-data", "--config", tiny_config_path, "--print-config"])
    first = capsys.readouterr().out
    main(["gen-data", "--config", tiny_config_path, "--print-config"])
    assert capsys.readouterr().out == first
    assert '": ' not in first  # compact separators


# ---------------------------------------------------------------------------
# exit codes


def test_no_command_prints_help(capsys):
    assert main([]) == 1
    assert "COMMAND" in capsys.readouterr().out


def test_unknown_command_is_usage_error():
    with pytest.raises(SystemExit) as err:
        main(["frobnicate"])
    assert err.value.code == 1


def test_train_requires_stage(tmp_path):
    with pytest.raises(SystemExit) as err:
        main(["train", "--run-dir", str(tmp_path)])
    assert err.value.code == 1


def test_missing_config_file(tmp_path, capsys):
    code = main(
        ["gen-data", "--config", str(tmp_path / "nope.json"), "--run-dir", str(tmp_path)]
    )
    assert code == 2
    assert "not found" in capsys.readouterr().err


def test_invalid_config_json(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    assert main(["gen-data", "--config", str(bad), "--run-dir", str(tmp_path)]) == 2
    assert "JSON" in capsys.readouterr().err


def test_unknown_config_keys(tmp_path, capsys):
    for payload in ({"bogus": 1}, {"corpus": {"bogus": 1}}):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(payload), encoding="utf-8")
        assert main(["gen-data", "--config", str(path), "--run-dir", str(tmp_path)]) == 2
        assert "bogus" in capsys.readouterr().err


def test_invalid_rho_override(tmp_path, capsys):
    code = main(["gen-data", "--run-dir", str(tmp_path), "--rho", "0.5", "--print-config"])
    assert code == 2
    assert "rho" in capsys.readouterr().err


def test_select_before_fit_ood(tmp_path, capsys):
    code = main(["select", "--run-dir", str(tmp_path / "empty")])
    assert code == 1
    err = capsys.readouterr().err
    assert "fit-ood" in err
    assert "missing artifact" in err


# ---------------------------------------------------------------------------
# pipeline artifacts


EXPECTED_ARTIFACTS = (
    "config.json",
    "manifest.json",
    "backbone.ckpt",
    "phi_lp.ckpt",
    "phi_ft.ckpt",
    "thresholds.json",
    "score_report.tsv",
    "alpha_sweep.tsv",
    "best_alpha.json",
    "metrics.tsv",
    "hist.tsv",
    "data/train_id.emb",
    "data/train_id.tsv",
    "data/val_id.emb",
    "data/test_id.emb",
    "data/superset.emb",
    "data/pool.emb",
    "data/pool_truth.tsv",
    "data/select_truth.emb",
    "data/val_ood.emb",
    "data/test_ood.emb",
)


def test_pipeline_products_exist(pipeline_run):
    for name in EXPECTED_ARTIFACTS:
        assert (pipeline_run / name).is_file(), name


def test_manifest_hashes_match_files(pipeline_run):
    manifest = json.loads((pipeline_run / "manifest.json").read_text(encoding="utf-8"))
    assert "config.json" in manifest and "metrics.tsv" in manifest
    for name, digest in manifest.items():
        path = pipeline_run / name
        assert path.is_file(), name
        assert hashlib.sha256(path.read_bytes()).hexdigest() == digest, name


def test_metrics_table_has_both_splits(pipeline_run):
    lines = (pipeline_run / "metrics.tsv").read_text(encoding="utf-8").splitlines()
    assert lines[1] == "split\tmacro_f1\taccuracy\tf1_ir\tf1_wr\tf1_sr\tn"
    splits = [ln.split("\t")[0] for ln in lines[2:]]
    assert splits == ["id", "ood"]
    for ln in lines[2:]:
        fields = ln.split("\t")
        assert len(fields) == 7
        assert 0.0 <= float(fields[1]) <= 1.0


def test_best_alpha_lands_on_the_grid(pipeline_run):
    payload = json.loads((pipeline_run / "best_alpha.json").read_text(encoding="utf-8"))
    assert payload["best_alpha"] in [round(0.1 * i, 1) for i in range(11)]


def test_pipeline_is_bitwise_reproducible(tiny_config_path, pipeline_run, tmp_path):
    second = tmp_path / "r2"
    code = main(["pipeline", "--config", tiny_config_path, "--run-dir", str(second)])
    assert code == 0
    assert tree_hashes(pipeline_run) == tree_hashes(second)


def test_interpolate_endpoints_reproduce_stage_checkpoints(
    tiny_config_path, pipeline_run
):
    for alpha, stage_file in (("0", "phi_lp.ckpt"), ("1", "phi_ft.ckpt")):
        code = main(
            [
                "interpolate",
                "--config", tiny_config_path,
                "--run-dir", str(pipeline_run),
                "--alpha", alpha,
            ]
        )
        assert code == 0
        blended = (pipeline_run / f"phi_alpha_{alpha}.ckpt").read_bytes()
        assert blended == (pipeline_run / stage_file).read_bytes()


def test_eval_redeploys_after_interpolate(tiny_config_path, pipeline_run, capsys):
    # eval prefers the sweep-selected blend recorded in best_alpha.json
    code = main(
        ["eval", "--config", tiny_config_path, "--run-dir", str(pipeline_run)]
    )
    assert code == 0
    out = capsys.readouterr().out
    assert "metrics.tsv" in out


# ---------------------------------------------------------------------------
# experiment table commands


@pytest.mark.slow
def test_cli_ablate_writes_table(tiny_config_path, pipeline_run, capsys):
    code = main(
        ["ablate", "--config", tiny_config_path, "--run-dir", str(pipeline_run)]
    )
    assert code == 0
    lines = (pipeline_run / "ablation.tsv").read_text(encoding="utf-8").splitlines()
    assert lines[0].startswith("# darl ")
    assert "seeds 5,6" in lines[0]
    assert lines[1].startswith("seed\trung\tlabel")
    assert sum(1 for ln in lines if ln.startswith("mean\t")) == 4


@pytest.mark.slow
def test_cli_budget_sweep_writes_table(tiny_config_path, pipeline_run):
    code = main(
        ["sweep-budget", "--config", tiny_config_path, "--run-dir", str(pipeline_run)]
    )
    assert code == 0
    lines = (pipeline_run / "budget_sweep.tsv").read_text(encoding="utf-8").splitlines()
    assert lines[1] == "seed\tbudget\tstrategy\tn_aug\tf1_id\tf1_ood"
    budgets = {ln.split("\t")[1] for ln in lines[2:]}
    assert budgets == {"0.5", "1"}
