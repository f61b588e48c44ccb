import csv
import json
import math
from fractions import Fraction

import numpy as np
import pytest

from patchsr import biomatch, metrics
from patchsr.errors import ConfigError, DataError, ProtocolError
from patchsr.harness.cli import main
from patchsr.harness.config import ExperimentConfig, build_config, read_config_file, set_key, write_config_file
from patchsr.harness.experiment import Frame, align_record, make_lr, run_experiment
from patchsr.harness.manifest import CSV_FIELDS, load_manifest, save_manifest
from patchsr.harness.report import COLUMNS, Cell, Report, emit_report, load_report
from patchsr.harness.synth import generate_synthetic_corpus
from patchsr.imaging import read_image, write_image


@pytest.fixture(scope="module")
def face_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("faces")
    man = generate_synthetic_corpus(3, 5, 3, "face", out)
    save_manifest(out / "manifest.csv", man)
    return out


def _row(**kw):
    row = {k: "" for k in CSV_FIELDS}
    row.update(path="a.png", subject="s1", sample="0", modality="face", role="gallery",
               left_eye_x="3", left_eye_y="4", right_eye_x="10", right_eye_y="4", mouth_x="6", mouth_y="12")
    row.update(kw)
    return row


def _write_manifest(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        w.writerows(rows)


class TestManifest:
    def test_empty(self, tmp_path):
        (tmp_path / "m.csv").write_text(",".join(CSV_FIELDS) + "\n")
        with pytest.raises(DataError, match="no records"):
            load_manifest(tmp_path / "m.csv")

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_manifest(tmp_path / "none.csv")

    def test_one_record(self, tmp_path):
        write_image(tmp_path / "a.png", np.zeros((16, 14)))
        _write_manifest(tmp_path / "m.csv", [_row()])
        man = load_manifest(tmp_path / "m.csv")
        assert len(man) == 1 and man.modality == "face"

    def test_landmark_out_of_bounds(self, tmp_path):
        write_image(tmp_path / "a.png", np.zeros((16, 14)))
        _write_manifest(tmp_path / "m.csv", [_row(subject="bob", sample="4", right_eye_x="30")])
        with pytest.raises(DataError, match=r"subject bob, sample 4.*right_eye"):
            load_manifest(tmp_path / "m.csv")

    def test_malformed_value(self, tmp_path):
        write_image(tmp_path / "a.png", np.zeros((16, 14)))
        _write_manifest(tmp_path / "m.csv", [_row(mouth_y="abc")])
        with pytest.raises(DataError, match="mouth_y"):
            load_manifest(tmp_path / "m.csv")

    def test_duplicate(self, tmp_path):
        write_image(tmp_path / "a.png", np.zeros((16, 14)))
        _write_manifest(tmp_path / "m.csv", [_row(), _row()])
        with pytest.raises(DataError, match="duplicate"):
            load_manifest(tmp_path / "m.csv")

    def test_json_and_round_trip(self, tmp_path, face_corpus):
        man = load_manifest(face_corpus / "manifest.csv")
        save_manifest(tmp_path / "copy.csv", man)
        again = load_manifest(tmp_path / "copy.csv")
        assert [r.key for r in again.records] == [r.key for r in man.records]
        rows = [{"path": str(r.path), "subject": r.subject, "sample": r.sample, "modality": "face",
                 "role": r.role, "landmarks": {k: list(v) for k, v in r.landmarks.points.items()}}
                for r in man.records]
        (tmp_path / "m.json").write_text(json.dumps(rows))
        js = load_manifest(tmp_path / "m.json")
        assert js.records[4].landmarks.array().tolist() == man.records[4].landmarks.array().tolist()


class TestSynth:
    def test_deterministic(self, tmp_path):
        a = generate_synthetic_corpus(11, 2, 2, "iris", tmp_path / "a")
        b = generate_synthetic_corpus(11, 2, 2, "iris", tmp_path / "b")
        for ra, rb in zip(a.records, b.records):
            assert ra.path.read_bytes() == rb.path.read_bytes()
            assert ra.landmarks.array().tolist() == rb.landmarks.array().tolist()

    def test_roles(self, face_corpus):
        man = load_manifest(face_corpus / "manifest.csv")
        assert {r.role for r in man.records if r.sample == 0} == {"gallery"}
        assert {r.role for r in man.records if r.sample > 0} == {"probe"}

    def test_within_subject_closer(self, face_corpus):
        man = load_manifest(face_corpus / "manifest.csv")
        feats = {r.key: (r.subject, biomatch.lbp_feature(align_record(r))) for r in man.records}
        within, between = [], []
        keys = sorted(feats)
        for i, a in enumerate(keys):
            for b in keys[i + 1:]:
                d = biomatch.chi_square(feats[a][1], feats[b][1])
                (within if feats[a][0] == feats[b][0] else between).append(d)
        assert np.mean(within) < np.mean(between)

    def test_single_sample_protocol_error(self, tmp_path):
        man = generate_synthetic_corpus(0, 2, 1, "face", tmp_path)
        items = [biomatch.Labeled(r.subject, r.sample, biomatch.lbp_feature(read_image(r.path))) for r in man.records]
        with pytest.raises(ProtocolError):
            biomatch.run_verification(items, items)
        with pytest.raises(ConfigError):
            run_experiment(ExperimentConfig(magnifications=[20]), man)

    def test_needs_two_subjects(self, tmp_path):
        with pytest.raises(ValueError):
            generate_synthetic_corpus(0, 1, 3, "face", tmp_path)


class TestConfig:
    def test_face_ladder_factors(self):
        cfg = ExperimentConfig()
        assert [cfg.factor(s) for s in cfg.ladder] == [5, 4, Fraction(8, 3), 2]
        assert cfg.label(10) == "IED10"

    def test_iris_defaults(self):
        cfg = ExperimentConfig(modality="iris")
        assert cfg.ladder == [2, 4, 8, 16, 22] and cfg.mirror
        assert cfg.params("line").reproject

    def test_file_and_overrides(self, tmp_path):
        (tmp_path / "c.ini").write_text("[experiment]\nmodality = face\nmethods = bicubic, lmcss\n"
                                        "magnifications = 10\nseed = 4\n[method.lmcss]\nk = 20\n")
        raw = read_config_file(tmp_path / "c.ini")
        set_key(raw, "seed", "9")
        set_key(raw, "lmcss.tau", "0.5")
        cfg = build_config(raw)
        cfg.validate()
        assert cfg.seed == 9 and cfg.methods == ["bicubic", "lmcss"]
        p = cfg.params("lmcss")
        assert p.k == 20 and p.tau == 0.5

    def test_write_read_round_trip(self, tmp_path):
        cfg = ExperimentConfig(methods=["pp", "line"], magnifications=[8, 10], noise_sigma=2.5,
                               method_overrides={"line": {"k": 30}})
        write_config_file(tmp_path / "c.ini", cfg)
        again = build_config(read_config_file(tmp_path / "c.ini"))
        assert again.digest() == cfg.digest()

    @pytest.mark.parametrize("raw", [{"modality": "voice"}, {"methods": ["srcnn"]},
                                     {"magnifications": [40]}, {"method_overrides": {"pp": {"bogus": 1}}},
                                     {"crop_fraction": 0.0}])
    def test_invalid(self, raw):
        with pytest.raises(ConfigError):
            build_config(raw).validate()

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            set_key({}, "colour", "red")

    def test_digest_changes(self):
        assert ExperimentConfig(seed=1).digest() != ExperimentConfig(seed=2).digest()


def _cell(method="pp", mag="x2"):
    return Cell(method, mag, 2.0, 3, 30.5, 0.9, 31.0, 0.91, 0.1, 0.95, 0.75, 3, 6, "scores/a.csv", {"k": 5})


class TestReport:
    def test_empty_is_header_only(self, tmp_path):
        path = emit_report(Report("face", "abc"), "csv", tmp_path / "r.csv")
        assert path.read_text().splitlines() == [",".join(COLUMNS)]

    def test_one_row(self, tmp_path):
        path = emit_report(Report("face", "abc", rows=[_cell()]), "csv", tmp_path / "r.csv")
        rows = list(csv.DictReader(path.read_text().splitlines()))
        assert len(rows) == 1 and float(rows[0]["psnr"]) == 30.5

    def test_json_round_trip(self, tmp_path):
        inf_cell = _cell("hr", "none")
        inf_cell.psnr = math.inf
        rep = Report("iris", "h", {"seed": 1}, [_cell(), _cell("line", "x8")], inf_cell)
        emit_report(rep, "json", tmp_path / "r.json")
        assert load_report(tmp_path / "r.json") == rep

    def test_markdown_layout(self, tmp_path):
        rep = Report("iris", "h", rows=[_cell("pp", "x2"), _cell("pp", "x8"), _cell("line", "x2")])
        text = emit_report(rep, "markdown", tmp_path / "r.md").read_text()
        header = next(line for line in text.splitlines() if line.startswith("| method"))
        assert "x2" in header and "x8" in header
        assert any(line.startswith("| line") for line in text.splitlines())

    def test_bad_format(self, tmp_path):
        with pytest.raises(ValueError):
            emit_report(Report("face", "h"), "xml", tmp_path / "r.xml")


class TestFrame:
    def test_pad_crop(self):
        f = Frame(80, 120, Fraction(8, 3))
        assert all(v % 8 == 0 for v in f.padded)
        img = np.random.default_rng(0).uniform(0, 255, (120, 80))
        assert np.array_equal(f.crop(f.pad(img)), img)
        w, h = f.lr_size
        assert Fraction(f.padded[0], w) == f.factor and Fraction(f.padded[1], h) == f.factor


class TestExperiment:
    def test_bicubic_one_row_per_magnification(self, face_corpus, tmp_path):
        man = load_manifest(face_corpus / "manifest.csv")
        cfg = ExperimentConfig(magnifications=[10, 20], methods=["bicubic"], save_images=True)
        rep = run_experiment(cfg, man, tmp_path)
        assert [(r.method, r.magnification) for r in rep.rows] == [("bicubic", "IED10"), ("bicubic", "IED20")]
        assert all(math.isfinite(r.psnr) for r in rep.rows)
        assert rep.baseline.method == "hr"
        cell = rep.cell("bicubic", "IED10")
        assert cell.n_probes == 10 and cell.n_genuine == 5 * 3 and cell.n_impostor == 5 * 4
        assert (tmp_path / cell.scores_file).exists()
        # the stored reconstructions reproduce the reported PSNR
        ps = [metrics.psnr(np.load(p), np.load(tmp_path / "images" / "reference" / p.name))
              for p in sorted((tmp_path / "images" / "bicubic_IED10").glob("*.npy"))]
        assert len(ps) == 10
        assert abs(np.mean(ps) - cell.psnr) <= 1e-9

    def test_trained_methods_and_determinism(self, face_corpus, tmp_path):
        man = load_manifest(face_corpus / "manifest.csv")
        cfg = ExperimentConfig(magnifications=[20], methods=["bicubic", "pp", "eigen", "lmcss"],
                               method_overrides={"lmcss": {"k": 5}})
        run_experiment(cfg, man, tmp_path / "a")
        run_experiment(cfg, man, tmp_path / "b")
        for name in ["report.json", "report.csv", "report.md", "metrics.csv", "scores/pp_IED20.csv"]:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        rep = load_report(tmp_path / "a" / "report.json")
        assert rep.cell("lmcss", "IED20").params["k"] == 5

    def test_modality_mismatch(self, face_corpus):
        man = load_manifest(face_corpus / "manifest.csv")
        with pytest.raises(ConfigError):
            run_experiment(ExperimentConfig(modality="iris", magnifications=[2]), man)


class TestCli:
    def test_synth_and_bench(self, tmp_path, capsys):
        assert main(["synth", "--modality", "face", "--subjects", "3", "--samples", "2",
                     "--seed", "5", "--out", str(tmp_path / "c")]) == 0
        assert main(["bench", "--manifest", str(tmp_path / "c" / "manifest.csv"), "--out", str(tmp_path / "r"),
                     "--magnifications", "20", "--methods", "bicubic,pp"]) == 0
        assert "pp" in capsys.readouterr().out
        assert (tmp_path / "r" / "report.csv").exists()

    def test_train_reconstruct_metrics_verify(self, face_corpus, tmp_path, capsys):
        man = str(face_corpus / "manifest.csv")
        assert main(["train", "--manifest", man, "--step", "20", "--exclude", "face000",
                     "--eigen", "--out", str(tmp_path / "d.pldc")]) == 0
        rec = load_manifest(man).records[1]
        frame = Frame(80, 120, Fraction(2))
        x = make_lr(frame.pad(align_record(rec)), frame, ExperimentConfig())
        np.save(tmp_path / "x.npy", x)
        write_image(tmp_path / "x.png", x)
        assert main(["reconstruct", "--input", str(tmp_path / "x.png"), "--method", "pp",
                     "--dictionary", str(tmp_path / "d.pldc"), "--out", str(tmp_path / "y.png")]) == 0
        assert read_image(tmp_path / "y.png").shape == (120, 80)
        assert main(["reconstruct", "--input", str(tmp_path / "x.png"), "--method", "eigen",
                     "--model", str(tmp_path / "d.eigen.npz"), "--out", str(tmp_path / "e.png")]) == 0
        capsys.readouterr()
        assert main(["metrics", str(tmp_path / "y.png"), str(tmp_path / "y.png")]) == 0
        assert json.loads(capsys.readouterr().out)["ssim"] == 1.0
        assert main(["verify", "--manifest", man, "--scores", str(tmp_path / "s.csv")]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["n_genuine"] == 15 and out["n_impostor"] == 20

    def test_config_error_exit_code(self, face_corpus, tmp_path):
        assert main(["bench", "--manifest", str(face_corpus / "manifest.csv"), "--out", str(tmp_path),
                     "--methods", "srcnn"]) == 2
        assert main(["bench", "--manifest", str(face_corpus / "manifest.csv"), "--out", str(tmp_path),
                     "--param", "pp.bogus=1"]) == 2

    def test_data_error_exit_code(self, tmp_path):
        assert main(["bench", "--manifest", str(tmp_path / "missing.csv"), "--out", str(tmp_path)]) == 3
        assert main(["metrics", str(tmp_path / "a.png"), str(tmp_path / "b.png")]) == 3
