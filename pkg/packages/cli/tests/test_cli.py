import json

import pytest
from click.testing import CliRunner

from lare2_cli.cli import cli
from lare2_core.bench import EvalMatrix
from lare2_core.lare import read_lare_cache
from lare2_core.manifest import DatasetManifest

TINY_CONFIG = """\
input_size = 16
T = 20
t_extract = 4
e_ensemble = 2
ddim_steps = 5
dire_steps = 2
codec_epochs = 1
codec_batch_size = 8
diffusion_epochs = 1
diffusion_batch_size = 8
epochs = 1
batch_size = 8
feature_channels = 4
heads = 2
head_dim = 2
denoiser_channels = 8
denoiser_blocks = 1
pretrain_count = 16
real_pool_count = 30
reals_per_subset = 10
fakes_per_subset = 10
"""

PIPELINE = (
    ["forge"],
    ["train-codec"],
    ["train-diffusion", "--tag", "a"],
    ["train-diffusion", "--tag", "b"],
    ["gen"],
    ["extract"],
    ["train-detector"],
    ["eval", "--matrix"],
)


def invoke(runner, config_path, *args):
    return runner.invoke(cli, ["--config", str(config_path), "--quiet", *args], catch_exceptions=False)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A tiny pipeline run through every stage up to the evaluation matrix."""
    root = tmp_path_factory.mktemp("workspace")
    config_path = root / "lare2.conf"
    config_path.write_text(TINY_CONFIG + f"artifacts_dir = {(root / 'artifacts').as_posix()}\n")
    runner = CliRunner()
    for args in PIPELINE:
        result = invoke(runner, config_path, *args)
        assert result.exit_code == 0, f"{args}: {result.output}"
    return root / "artifacts", config_path


class TestPipeline:
    def test_subsets_manifest(self, workspace):
        artifacts, _ = workspace
        manifest = DatasetManifest.read(artifacts / "subsets.jsonl")
        assert manifest.subsets() == ["ddpm_a", "ddim_a", "ddpm_b"]
        assert len(manifest) == 60
        manifest.check_paths()

    def test_cache_records_extraction_settings(self, workspace):
        artifacts, _ = workspace
        maps = read_lare_cache(artifacts / "lare.cache")
        assert len(maps) == 60
        assert {(lare.t, lare.e) for lare in maps.values()} == {(4, 2)}
        assert {lare.shape for lare in maps.values()} == {(4, 2, 2)}

    def test_detectors_and_matrix(self, workspace):
        artifacts, _ = workspace
        for tag in ("ddpm_a", "ddim_a", "ddpm_b"):
            assert (artifacts / "detectors" / f"egre_{tag}.ck").exists()
        matrix = EvalMatrix.read_csv(artifacts / "reports" / "matrix_egre.csv")
        assert len(matrix.cells) == 9
        assert (artifacts / "reports" / "matrix_egre_avg.csv").read_text().startswith("train_tag,avg_acc,avg_ap\n")

    def test_run_metadata(self, workspace):
        artifacts, _ = workspace
        metadata = json.loads((artifacts / "runs" / "extract.json").read_text())
        assert (metadata["t"], metadata["e"], metadata["weights"]) == (4, 2, "a")
        assert metadata["ap_tie_break"] == "ascending image id"
        assert len(metadata["config_hash"]) == 64
        assert "timestamp" not in json.dumps(metadata)

    def test_extract_overrides(self, workspace, tmp_path):
        artifacts, config_path = workspace
        result = invoke(CliRunner(), config_path, "extract", "--t", "6", "--e", "1", "--cache", str(tmp_path / "t6.cache"))
        assert result.exit_code == 0, result.output
        assert {(lare.t, lare.e) for lare in read_lare_cache(tmp_path / "t6.cache").values()} == {(6, 1)}

    def test_dire_cache(self, workspace, tmp_path):
        artifacts, config_path = workspace
        result = invoke(CliRunner(), config_path, "extract-dire", "--cache", str(tmp_path / "dire.cache"))
        assert result.exit_code == 0, result.output
        assert {(lare.t, lare.e) for lare in read_lare_cache(tmp_path / "dire.cache").values()} == {(2, 0)}

        result = invoke(
            CliRunner(), config_path, "train-detector", "--subset", "ddpm_a", "--cache", str(tmp_path / "dire.cache")
        )
        assert result.exit_code == 0, result.output
        assert (artifacts / "detectors" / "egre-dire_ddpm_a.ck").exists()
        assert (artifacts / "runs" / "train-detector-egre-dire.json").exists()

    def test_dire_features_follow_artifacts_dir(self, workspace, tmp_path, monkeypatch):
        artifacts, config_path = workspace
        monkeypatch.chdir(tmp_path)
        runner = CliRunner()
        for args in (["extract-dire"], ["train-detector", "--features", "dire"], ["eval", "--features", "dire", "--matrix"]):
            result = invoke(runner, config_path, *args)
            assert result.exit_code == 0, f"{args}: {result.output}"

        assert (artifacts / "dire.cache").exists()
        for tag in ("ddpm_a", "ddim_a", "ddpm_b"):
            assert (artifacts / "detectors" / f"egre-dire_{tag}.ck").exists()
        assert len(EvalMatrix.read_csv(artifacts / "reports" / "matrix_egre-dire.csv").cells) == 9
        assert not (tmp_path / "artifacts").exists()

    def test_baseline_in_distribution_eval(self, workspace):
        _, config_path = workspace
        runner = CliRunner()
        assert invoke(runner, config_path, "train-detector", "--mode", "baseline", "--subset", "ddpm_a").exit_code == 0
        result = invoke(runner, config_path, "eval", "--mode", "baseline")
        # Only ddpm_a has a baseline detector, so the second subset fails to load.
        assert result.exit_code == 1
        assert result.output.startswith("ddpm_a: ACC")

    def test_bench(self, workspace):
        artifacts, config_path = workspace
        result = invoke(CliRunner(), config_path, "bench", "--count", "2")
        assert result.exit_code == 0, result.output
        lines = (artifacts / "reports" / "bench.csv").read_text().splitlines()
        assert lines[0] == "method,calls_per_image,median_ms_per_image"
        assert lines[1].startswith("lare,2,")
        assert lines[2].startswith("dire,4,")
        assert lines[3].startswith("ratio,2,")

    def test_lossgap(self, workspace):
        artifacts, config_path = workspace
        result = invoke(CliRunner(), config_path, "lossgap", "--plot")
        assert result.exit_code == 0, result.output
        lines = (artifacts / "reports" / "lossgap.csv").read_text().splitlines()
        assert lines[0] == "t,mean_real,mean_fake,n_real,n_fake"
        assert [line.split(",")[0] for line in lines[1:]] == ["2", "4", "6", "8", "10"]
        assert (artifacts / "reports" / "lossgap.png").exists()

    def test_sweep(self, workspace):
        artifacts, config_path = workspace
        result = invoke(CliRunner(), config_path, "sweep", "--param", "e", "--grid", "1,2")
        assert result.exit_code == 0, result.output
        lines = (artifacts / "reports" / "sweep_e.csv").read_text().splitlines()
        assert [line.split(",")[:2] for line in lines[1:]] == [["e", "1"], ["e", "2"]]

    def test_overlay(self, workspace):
        artifacts, config_path = workspace
        result = invoke(CliRunner(), config_path, "overlay", "--count", "1")
        assert result.exit_code == 0, result.output
        assert list((artifacts / "overlays").rglob("*.png"))


class TestErrors:
    def test_unknown_command(self, tmp_path):
        result = CliRunner().invoke(cli, ["--config", str(tmp_path / "none.conf"), "frobnicate"])
        assert result.exit_code == 2

    def test_unknown_config_key(self, tmp_path):
        (tmp_path / "lare2.conf").write_text("colour = red\n")
        result = CliRunner().invoke(cli, ["--config", str(tmp_path / "lare2.conf"), "forge"])
        assert result.exit_code == 2
        assert "colour" in result.output

    def test_missing_artifacts_exit_one(self, tmp_path):
        (tmp_path / "lare2.conf").write_text(f"artifacts_dir = {(tmp_path / 'artifacts').as_posix()}\n")
        result = CliRunner().invoke(cli, ["--config", str(tmp_path / "lare2.conf"), "train-codec"])
        assert result.exit_code == 1
        assert "Cannot read manifest" in result.output

    def test_parameter_error_is_usage_error(self, workspace):
        _, config_path = workspace
        result = CliRunner().invoke(cli, ["--config", str(config_path), "extract", "--e", "0", "--cache", "/dev/null"])
        assert result.exit_code == 2
        assert "ensemble size" in result.output

    def test_bench_needs_three_repeats(self, workspace):
        _, config_path = workspace
        result = CliRunner().invoke(cli, ["--config", str(config_path), "bench", "--repeats", "2"])
        assert result.exit_code == 2

    def test_extraction_step_zero_is_usage_error(self, workspace, tmp_path):
        _, config_path = workspace
        result = CliRunner().invoke(cli, ["--config", str(config_path), "extract", "--t", "0", "--cache", str(tmp_path / "t0.cache")])
        assert result.exit_code == 2
        assert "extraction step" in result.output
        assert not (tmp_path / "t0.cache").exists()
