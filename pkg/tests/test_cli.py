import filecmp
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from bprelab.cli import build_model, config_digest, load_config, main, run
from bprelab.errors import ConfigError
from bprelab.streams import substream

SMALL_CONFIG = """
[model]
declared_delta = 4.0

[[model.scenario]]
weight = 0.8
family = "poisson-product"
mean_rows = [[0.5]]

[[model.scenario]]
weight = 0.2
family = "poisson-product"
mean_rows = [[2.0]]

[spectral]
theta_grid = [0.0, 0.5, 1.0]

[survival]
n_list = [4, 8]
n_paths = 2000
n_paths_direct = 500
enum_max_n = 8
burn_in = 4

[mu_tail]
a_values = [-0.6931471805599453]
n_list = [8, 16]
n_paths = 4000

[harmonic]
a_values = [-2.0794415416798357, -1.3862943611198906, -0.6931471805599453]
horizon = 32
n_paths = 4000
sigma_n = 16
sigma_paths = 2000

[diagnostics]
sweep_count = 20
identity_n_max = 12
series_n_list = [64, 128, 256, 512]
series_paths = 4000

[run]
seed = 11
out_dir = "runs"
"""

BAD_DELTA_CONFIG = """
[model]
declared_delta = 1.5

[[model.scenario]]
weight = 1.0
family = "poisson-product"
mean_rows = [[0.2, 0.8], [0.4, 0.4]]

[run]
seed = 1
"""


@pytest.fixture()
def small_config(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL_CONFIG)
    return path


def _tree_files(root: Path):
    return sorted(p.relative_to(root) for p in root.rglob("*.tsv"))


def test_full_small_run_passes(small_config, tmp_path):
    record = run(small_config, "all", out_dir=tmp_path / "out")
    assert record.exit_code in (0, 3)      # tiny budgets may be inconclusive
    assert (record.out_dir / "manifest.txt").exists()
    stages = set(record.stages)
    assert {"conditions", "lyapunov", "calibrate", "survival",
            "mu-tail", "harmonic", "diagnostics"} <= stages
    assert record.stages["conditions"].status == "pass"
    text = (record.out_dir / "manifest.txt").read_text()
    assert "stage.survival.artifact.estimates" in text


def test_reproducible_tables(small_config, tmp_path):
    rec1 = run(small_config, "all", out_dir=tmp_path / "o1")
    rec2 = run(small_config, "all", out_dir=tmp_path / "o2")
    files1 = _tree_files(rec1.out_dir)
    files2 = _tree_files(rec2.out_dir)
    assert files1 == files2 and files1
    for rel in files1:
        a = (rec1.out_dir / rel).read_bytes()
        b = (rec2.out_dir / rel).read_bytes()
        assert a == b, f"artifact {rel} differs between identical runs"


def test_workers_do_not_change_tables(small_config, tmp_path):
    rec1 = run(small_config, "survival", out_dir=tmp_path / "w1", workers=1)
    rec2 = run(small_config, "survival", out_dir=tmp_path / "w2", workers=2)
    a = (rec1.out_dir / "survival/estimates.tsv").read_bytes()
    b = (rec2.out_dir / "survival/estimates.tsv").read_bytes()
    assert a == b


def test_bad_delta_records_ratio_failure(tmp_path):
    cfg = tmp_path / "bad.toml"
    cfg.write_text(BAD_DELTA_CONFIG)
    record = run(cfg, "conditions", out_dir=tmp_path / "out")
    assert record.exit_code == 2
    report = (record.out_dir / "conditions/report.tsv").read_text()
    assert "entry_ratio" in report and "false" in report


def test_negative_control_band_fails(tmp_path):
    cfg = Path(__file__).resolve().parents[1] / "configs/negative_control.toml"
    record = run(cfg, "survival", out_dir=tmp_path / "out")
    assert record.exit_code == 2
    assert record.stages["survival"].status == "fail"


def test_digest_stable_under_reordering(tmp_path):
    a = tmp_path / "a.toml"
    b = tmp_path / "b.toml"
    a.write_text("""
[run]
seed = 3
out_dir = "runs"

[model]
declared_delta = 4.0

[[model.scenario]]
weight = 1.0
family = "poisson-product"
mean_rows = [[0.5]]
""")
    b.write_text("""
[model]
declared_delta = 4.0

[[model.scenario]]
family = "poisson-product"
mean_rows = [[0.5]]
weight = 1.0

[run]
out_dir = "runs"
seed = 3
""")
    assert config_digest(load_config(a)) == config_digest(load_config(b))


def test_schema_errors_carry_key_paths(tmp_path):
    cfg = tmp_path / "broken.toml"
    cfg.write_text("[model]\ndeclared_delta = 4.0\n\n[run]\nseed = 1\n")
    with pytest.raises(ConfigError) as info:
        build_model(load_config(cfg))
    assert "model.scenario" in str(info.value)

    cfg2 = tmp_path / "broken2.toml"
    cfg2.write_text("""
[model]
declared_delta = 4.0

[[model.scenario]]
weight = 1.0
mean_rows = [[0.5]]

[survival]
n_list = [8, 4]

[run]
seed = 1
""")
    with pytest.raises(ConfigError) as info:
        run(cfg2, "conditions", out_dir=tmp_path / "x")
    assert "survival.n_list" in str(info.value)


def test_missing_seed_rejected(tmp_path):
    cfg = tmp_path / "noseed.toml"
    cfg.write_text("""
[model]
declared_delta = 4.0

[[model.scenario]]
weight = 1.0
family = "poisson-product"
mean_rows = [[0.5]]
""")
    with pytest.raises(ConfigError) as info:
        run(cfg, "conditions", out_dir=tmp_path / "x")
    assert "run.seed" in str(info.value)


def test_cli_entry_point_exit_codes(small_config, tmp_path):
    code = main(["conditions", "--config", str(small_config),
                 "--out", str(tmp_path / "m")])
    assert code == 0


def test_substreams_are_reproducible_and_distinct():
    a = substream(42, "stage", 0).random(5)
    b = substream(42, "stage", 0).random(5)
    c = substream(42, "stage", 1).random(5)
    d = substream(43, "stage", 0).random(5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def test_console_script_runs(small_config, tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "bprelab.cli", "lyapunov",
         "--config", str(small_config), "--out", str(tmp_path / "sub")],
        capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "lyapunov: pass" in proc.stdout
