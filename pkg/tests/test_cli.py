import csv
import shutil
import xml.etree.ElementTree as ET

import pytest

from hmuq.cli import main
from hmuq.dataio import load_dataset, read_annotations

from helpers import write_interobserver_fixture

SYNTH_CFG = """\
image_size = 32
num_images = 12
position_jitter = 2.0
seed = 5
num_landmarks = 2
landmark_0.structure = corner
landmark_0.orientation_deg = 0.0
landmark_0.noise_theta_deg = 0.0
landmark_0.noise_sigma_maj = 0.0
landmark_0.noise_sigma_min = 0.0
landmark_1.structure = edge
landmark_1.orientation_deg = 30.0
landmark_1.noise_theta_deg = 30.0
landmark_1.noise_sigma_maj = 2.0
landmark_1.noise_sigma_min = 0.8
"""

TRAIN_CFG = """\
iterations = 60
learning_rate = 1e-05
covariance_lr_multiplier = 3.0
batch_size = 2
seed = 1
dropout_rate = 0.1
predictor_width = 8
"""

NAMES_CFG = "0 = alpha\n1 = beta\n"

MEAS_CFG = """\
span.expression = distance(alpha, beta)
span.breakpoints = 6.0, 12.0
span.labels = short, mid, long
"""


def read_rows(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> train once; the artifact tree is shared by the read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    (root / "synth.cfg").write_text(SYNTH_CFG)
    (root / "train.cfg").write_text(TRAIN_CFG)
    (root / "names.cfg").write_text(NAMES_CFG)
    (root / "meas.cfg").write_text(MEAS_CFG)
    assert main(["synth", "--config", str(root / "synth.cfg"),
                 "--out", str(root / "d"), "--quiet"]) == 0
    assert main(["train", "--data", str(root / "d"), "--mode", "learned_aniso",
                 "--config", str(root / "train.cfg"),
                 "--out", str(root / "m"), "--quiet"]) == 0
    return root


class TestPipeline:
    def test_synth_writes_loadable_dataset(self, pipeline):
        ds = load_dataset(pipeline / "d" / "manifest.cfg")
        assert len(ds.ids) == 12
        assert ds.landmark_count == 2

    def test_train_artifacts(self, pipeline):
        assert (pipeline / "m" / "model.ckpt").exists()
        loss = read_rows(pipeline / "m" / "loss.csv")
        assert len(loss) == 60
        covs = read_rows(pipeline / "m" / "learned_covariances.csv")
        assert [r["landmark_id"] for r in covs] == ["0", "1"]

    def test_eval_one_row_per_landmark(self, pipeline):
        assert main(["eval", "--model", str(pipeline / "m"),
                     "--data", str(pipeline / "d"),
                     "--out", str(pipeline / "r"), "--quiet"]) == 0
        rows = read_rows(pipeline / "r" / "metrics.csv")
        assert [r["landmark_id"] for r in rows] == ["0", "1"]
        for row in rows:
            assert float(row["ratio_mean"]) >= 1.0
            assert 0.0 <= float(row["sdr_2"]) <= 100.0

    def test_predict_rows_reingest(self, pipeline):
        assert main(["predict", "--model", str(pipeline / "m"),
                     "--data", str(pipeline / "d"),
                     "--out", str(pipeline / "p"), "--quiet"]) == 0
        rows = read_annotations(pipeline / "p" / "predictions.csv")
        assert len(rows) == 24
        assert all(r.observer_id == "" for r in rows)

    def test_fit_csv(self, pipeline):
        assert main(["fit", "--model", str(pipeline / "m"),
                     "--data", str(pipeline / "d"),
                     "--out", str(pipeline / "f"), "--quiet"]) == 0
        rows = read_rows(pipeline / "f" / "fits.csv")
        assert len(rows) == 24
        for row in rows:
            assert float(row["sigma_maj"]) >= float(row["sigma_min"]) > 0

    def test_mcd_both_sources(self, pipeline):
        assert main(["mcd", "--model", str(pipeline / "m"),
                     "--data", str(pipeline / "d"), "--k", "5",
                     "--out", str(pipeline / "mc"), "--quiet"]) == 0
        rows = read_rows(pipeline / "mc" / "mcd.csv")
        sources = {r["source"] for r in rows}
        assert sources == {"mcd_max", "mcd_heatmap_fit"}

    def test_clinical_artifacts(self, pipeline):
        assert main(["clinical", "--model", str(pipeline / "m"),
                     "--data", str(pipeline / "d"),
                     "--names", str(pipeline / "names.cfg"),
                     "--measurements", str(pipeline / "meas.cfg"),
                     "--samples", "200", "--seed", "4",
                     "--out", str(pipeline / "rc"), "--quiet"]) == 0
        rows = read_rows(pipeline / "rc" / "classifications.csv")
        assert len(rows) == 12
        assert all(r["measurement"] == "span" for r in rows)
        curve = read_rows(pipeline / "rc" / "curve_span.csv")
        assert len(curve) == 12
        assert float(curve[-1]["fraction"]) == 1.0
        probs = read_rows(pipeline / "rc" / "probabilities.csv")
        assert len(probs) == 36  # 12 images x 3 classes


class TestPlots:
    def svg_tags(self, path):
        return [e.tag.split("}")[-1] for e in ET.parse(path).getroot().iter()]

    def test_ellipse_overlay_one_per_landmark(self, pipeline):
        assert main(["plot", "--kind", "ellipse_overlay",
                     "--model", str(pipeline / "m"), "--data", str(pipeline / "d"),
                     "--out", str(pipeline / "pl"), "--no-timestamp"]) == 0
        tags = self.svg_tags(pipeline / "pl" / "ellipse_overlay.svg")
        assert tags.count("ellipse") == 2

    def test_offset_scatter(self, pipeline):
        assert main(["plot", "--kind", "offset_scatter", "--landmark", "1",
                     "--model", str(pipeline / "m"), "--data", str(pipeline / "d"),
                     "--out", str(pipeline / "pl"), "--no-timestamp"]) == 0
        tags = self.svg_tags(pipeline / "pl" / "offset_scatter.svg")
        assert tags.count("circle") == 12
        assert tags.count("ellipse") == 2  # learned + empirical

    def test_accuracy_curve_from_csv(self, pipeline):
        curve = pipeline / "rc" / "curve_span.csv"
        assert main(["plot", "--kind", "accuracy_curve", "--curves", str(curve),
                     "--out", str(pipeline / "pl"), "--no-timestamp"]) == 0
        tags = self.svg_tags(pipeline / "pl" / "accuracy_curve.svg")
        assert tags.count("polyline") >= 1

    def test_sigma_vs_error(self, pipeline):
        assert main(["plot", "--kind", "sigma_vs_error", "--landmark", "0",
                     "--model", str(pipeline / "m"), "--data", str(pipeline / "d"),
                     "--out", str(pipeline / "pl"), "--no-timestamp"]) == 0
        tags = self.svg_tags(pipeline / "pl" / "sigma_vs_error.svg")
        assert tags.count("circle") == 12

    def test_timestamp_suppressed(self, pipeline):
        text = (pipeline / "pl" / "ellipse_overlay.svg").read_text()
        assert "generated" not in text

    def test_timestamp_default_on(self, pipeline, tmp_path):
        assert main(["plot", "--kind", "ellipse_overlay",
                     "--model", str(pipeline / "m"), "--data", str(pipeline / "d"),
                     "--out", str(tmp_path), "--quiet"]) == 0
        assert "generated" in (tmp_path / "ellipse_overlay.svg").read_text()


class TestDeterminism:
    def test_synth_rerun_byte_identical(self, pipeline, tmp_path):
        assert main(["synth", "--config", str(pipeline / "synth.cfg"),
                     "--out", str(tmp_path / "d2"), "--quiet"]) == 0
        for name in ("annotations.csv", "truth.csv", "images.csv"):
            assert (tmp_path / "d2" / name).read_bytes() == \
                (pipeline / "d" / name).read_bytes()

    def test_eval_rerun_byte_identical(self, pipeline, tmp_path):
        assert main(["eval", "--model", str(pipeline / "m"),
                     "--data", str(pipeline / "d"),
                     "--out", str(tmp_path), "--quiet"]) == 0
        assert (tmp_path / "metrics.csv").read_bytes() == \
            (pipeline / "r" / "metrics.csv").read_bytes()

    def test_mcd_rerun_byte_identical(self, pipeline, tmp_path):
        assert main(["mcd", "--model", str(pipeline / "m"),
                     "--data", str(pipeline / "d"), "--k", "5",
                     "--out", str(tmp_path), "--quiet"]) == 0
        assert (tmp_path / "mcd.csv").read_bytes() == \
            (pipeline / "mc" / "mcd.csv").read_bytes()

    def test_seed_changes_synth(self, pipeline, tmp_path):
        assert main(["synth", "--config", str(pipeline / "synth.cfg"), "--seed", "6",
                     "--out", str(tmp_path / "d3"), "--quiet"]) == 0
        assert (tmp_path / "d3" / "annotations.csv").read_bytes() != \
            (pipeline / "d" / "annotations.csv").read_bytes()


class TestInterobs:
    def test_report_matches_fixture(self, tmp_path):
        manifest = write_interobserver_fixture(tmp_path / "iobs", num_images=10)
        assert main(["interobs", "--data", str(manifest),
                     "--out", str(tmp_path), "--quiet"]) == 0
        rows = read_rows(tmp_path / "interobserver.csv")
        assert len(rows) == 5
        assert float(rows[0]["ratio_mean"]) == pytest.approx(2.57, abs=0.05)
        assert float(rows[0]["theta_mean_deg"]) == pytest.approx(39.33, abs=1.0)
        assert rows[0]["pe_mean"] == ""

    def test_rejects_single_annotator_data(self, pipeline, tmp_path):
        assert main(["interobs", "--data", str(pipeline / "d"),
                     "--out", str(tmp_path), "--quiet"]) == 1


class TestErrors:
    def test_unknown_subcommand_usage_exit(self):
        assert main(["frobnicate"]) == 2

    def test_unknown_flag_usage_exit(self):
        assert main(["synth", "--bogus"]) == 2

    def test_plot_missing_inputs_usage_exit(self):
        assert main(["plot", "--kind", "offset_scatter"]) == 2

    def test_missing_dataset_runtime_exit(self, tmp_path, capsys):
        assert main(["train", "--data", str(tmp_path / "nowhere"),
                     "--out", str(tmp_path), "--quiet"]) == 1
        assert "error:" in capsys.readouterr().err

    def test_out_of_bounds_annotation_names_image(self, pipeline, tmp_path, capsys):
        bad = tmp_path / "bad"
        shutil.copytree(pipeline / "d", bad)
        text = (bad / "annotations.csv").read_text().splitlines()
        parts = text[1].split(",")
        parts[3] = "32.0"  # == width, one past the last valid coordinate
        text[1] = ",".join(parts)
        (bad / "annotations.csv").write_text("\n".join(text) + "\n")
        assert main(["eval", "--model", str(pipeline / "m"), "--data", str(bad),
                     "--out", str(tmp_path), "--quiet"]) == 1
        err = capsys.readouterr().err
        assert "img_0000" in err and "out of bounds" in err

    def test_bad_config_key_runtime_exit(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("image_sise = 32\n")
        assert main(["synth", "--config", str(cfg),
                     "--out", str(tmp_path), "--quiet"]) == 1
        assert "image_sise" in capsys.readouterr().err


class TestConfigEnvVar:
    def test_env_supplies_config_path(self, pipeline, tmp_path, monkeypatch):
        monkeypatch.setenv("HMUQ_CONFIG", str(pipeline / "synth.cfg"))
        assert main(["synth", "--out", str(tmp_path / "denv"), "--quiet"]) == 0
        assert (tmp_path / "denv" / "annotations.csv").read_bytes() == \
            (pipeline / "d" / "annotations.csv").read_bytes()

    def test_flag_beats_env(self, pipeline, tmp_path, monkeypatch):
        monkeypatch.setenv("HMUQ_CONFIG", "/nonexistent.cfg")
        assert main(["synth", "--config", str(pipeline / "synth.cfg"),
                     "--out", str(tmp_path / "dflag"), "--quiet"]) == 0

    def test_quiet_silences_stdout(self, pipeline, tmp_path, capsys):
        assert main(["synth", "--config", str(pipeline / "synth.cfg"),
                     "--out", str(tmp_path / "dq"), "--quiet"]) == 0
        assert capsys.readouterr().out == ""
