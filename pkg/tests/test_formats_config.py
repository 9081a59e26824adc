import json

import numpy as np
import pytest

from anchor3d.assignment import Category, GroundTruth
from anchor3d.config import ToolkitConfig, dump_config, load_config, parse_config
from anchor3d.formats import (
    FormatError,
    gt_record,
    read_detections,
    read_gts,
    read_json,
    read_volume,
    write_detections,
    write_gts,
    write_volume,
)
from anchor3d.geometry import Box3, ConfigError
from anchor3d.inference import Detection
from anchor3d.synthetic import DESK_SPACING


class TestVolumeFile:
    def test_round_trip(self, tmp_path):
        vol = np.random.default_rng(0).normal(size=(5, 3, 4)).astype(np.float32)
        write_volume(tmp_path / "a.vol", vol, (1.0, 2.0, 3.0), seed=9)
        back, header = read_volume(tmp_path / "a.vol")
        assert back.tobytes() == vol.tobytes()
        assert header["shape"] == [5, 3, 4] and header["seed"] == 9

    def test_index_order(self, tmp_path):
        vol = np.zeros((2, 3, 4), np.float32)
        vol[1, 2, 3] = 7.0
        write_volume(tmp_path / "a.vol", vol, (1, 1, 1))
        raw = (tmp_path / "a.vol").read_bytes().split(b"\n", 1)[1]
        # last element in C order is [1, 2, 3]
        assert np.frombuffer(raw, "<f4")[-1] == 7.0

    def test_truncated(self, tmp_path):
        write_volume(tmp_path / "a.vol", np.zeros((4, 4, 4)), (1, 1, 1))
        data = (tmp_path / "a.vol").read_bytes()
        (tmp_path / "a.vol").write_bytes(data[:-4])
        with pytest.raises(FormatError, match="data bytes"):
            read_volume(tmp_path / "a.vol")

    def test_wrong_format(self, tmp_path):
        (tmp_path / "a.vol").write_bytes(b'{"format": "other"}\n')
        with pytest.raises(FormatError, match="not a"):
            read_volume(tmp_path / "a.vol")


class TestGroundTruthFile:
    def test_round_trip(self, tmp_path):
        gts = [GroundTruth(Box3(10, 5, 10, 4, 4, 4), Category.MALIGNANT),
               GroundTruth(Box3(30.5, 8, 20, 6, 2, 6), Category.BENIGN)]
        write_gts(tmp_path / "g.jsonl", [gt_record("v0", gts, DESK_SPACING), gt_record("v1", [], (1, 1, 1))])
        got = read_gts(tmp_path / "g.jsonl")
        assert list(got) == ["v0", "v1"]
        assert got["v0"] == (gts, DESK_SPACING)
        assert got["v1"] == ([], (1.0, 1.0, 1.0))

    def test_byte_identical_rewrite(self, tmp_path):
        gts = [GroundTruth(Box3(1.25, 2, 3, 4, 5, 6), Category.BENIGN)]
        write_gts(tmp_path / "a.jsonl", [gt_record("v", gts, DESK_SPACING)])
        got = read_gts(tmp_path / "a.jsonl")
        write_gts(tmp_path / "b.jsonl", [gt_record(k, *v) for k, v in got.items()])
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    @pytest.mark.parametrize("line, message", [
        ('{"volume_id": 3}', "volume_id"),
        ('{"volume_id": "v", "lesions": [{"box": [1, 2, 3], "category": "benign"}]}', "6 numbers"),
        ('{"volume_id": "v", "lesions": [{"box": [1, 2, 3, 4, 5, 6], "category": "cyst"}]}', "category"),
        ('{"volume_id": "v"', "line 1|Expecting"),
        ('[1, 2]', "JSON object"),
    ])
    def test_malformed_reports_line(self, tmp_path, line, message):
        p = tmp_path / "g.jsonl"
        p.write_text('{"volume_id": "ok", "lesions": []}\n\n' + line + "\n")
        with pytest.raises(FormatError, match=rf"g\.jsonl:3: .*({message})"):
            read_gts(p)

    def test_duplicate_volume(self, tmp_path):
        p = tmp_path / "g.jsonl"
        p.write_text('{"volume_id": "a"}\n{"volume_id": "a"}\n')
        with pytest.raises(FormatError, match=r":2: duplicate"):
            read_gts(p)


class TestDetectionFile:
    def test_round_trip_keeps_unknown_fields(self, tmp_path):
        p = tmp_path / "d.jsonl"
        p.write_text('{"volume_id": "v", "box": [1.0, 2.0, 3.0, 4.0, 5.0, 6.0], "score": 0.25, '
                     '"class_probs": [0.75, 0.25], "max_iou": 0.5, "reader": "r2", "flags": [1]}\n'
                     '{"volume_id": "w", "box": [1.5, 2.0, 3.0, 4.0, 5.0, 6.0], "score": 1, "class_probs": null}\n')
        dets = read_detections(p)
        assert dets[0][1].extra == {"reader": "r2", "flags": [1]}
        assert dets[1][1].class_probs is None and dets[1][1].max_iou is None
        write_detections(tmp_path / "e.jsonl", dets)
        assert (tmp_path / "e.jsonl").read_bytes() == p.read_bytes()

    def test_written_by_library(self, tmp_path):
        d = Detection(Box3(1, 2, 3, 4, 5, 6), 0.1 + 0.2, (0.3, 0.7))
        write_detections(tmp_path / "d.jsonl", [("v", d)])
        (vid, back), = read_detections(tmp_path / "d.jsonl")
        assert vid == "v" and back == d

    @pytest.mark.parametrize("rec, message", [
        ({"volume_id": "v", "box": [1, 2, 3, 4, 5, 6], "score": 1.5}, "score"),
        ({"volume_id": "v", "box": [1, 2, 3, 4, 5, 6], "score": "high"}, "score must be a number"),
        ({"volume_id": "v", "box": [1, 2, 3, 4, 5, True], "score": 0.5}, "6 numbers"),
        ({"volume_id": "v", "box": [1, 2, 3, 4, 5, 6], "score": 0.5, "class_probs": [0.5]}, "class_probs"),
        ({"volume_id": "v", "box": [1, 2, 3, 4, 5, 6], "score": 0.5, "class_probs": [0.5, 0.6]}, "class_probs"),
    ])
    def test_malformed_reports_line(self, tmp_path, rec, message):
        p = tmp_path / "d.jsonl"
        good = {"volume_id": "v", "box": [1, 2, 3, 4, 5, 6], "score": 0.5}
        p.write_text(json.dumps(good) + "\n" + json.dumps(rec) + "\n")
        with pytest.raises(FormatError, match=rf"d\.jsonl:2: .*{message}"):
            read_detections(p)

    def test_nan_refused_on_write(self, tmp_path):
        d = Detection(Box3(1, 2, 3, 4, 5, 6), 0.5, extra={"note": float("nan")})
        with pytest.raises(ValueError):
            write_detections(tmp_path / "d.jsonl", [("v", d)])

    def test_bad_json_document(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text('{\n  "a": 1,\n  oops\n}\n')
        with pytest.raises(FormatError, match=r"m\.json:3:"):
            read_json(p)


class TestConfig:
    def test_defaults(self):
        cfg = load_config()
        assert cfg == ToolkitConfig()
        assert cfg.loss.eta == 1.5 and cfg.loss.lam == 0.7
        assert cfg.assignment.positive_iou_threshold == 0.2 and cfg.assignment.negative_iou_threshold == 0.1

    def test_size_filter_in_voxels(self):
        pc = load_config().pipeline_config()
        mm3 = DESK_SPACING[0] * DESK_SPACING[1] * DESK_SPACING[2]
        assert pc.min_volume == pytest.approx(50.0 / mm3) and 11.6 < pc.min_volume < 11.7
        assert pc.max_volume == pytest.approx(30000.0 / mm3) and 6990 < pc.max_volume < 6993

    def test_file_values(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("seed: 4\nloss:\n  eta: 0.5\nanchors:\n  basic_sizes: [6, 10]\n  stride: [4, 4, 4]\n")
        cfg = load_config(p)
        assert cfg.seed == 4 and cfg.loss.eta == 0.5
        assert cfg.anchors.basic_sizes == (6.0, 10.0) and cfg.anchors.stride == (4, 4, 4)

    def test_unknown_key_line(self):
        with pytest.raises(ConfigError, match=r"c\.yaml:4: unknown key loss\.etta"):
            parse_config("seed: 1\nloss:\n  eta: 1.0\n  etta: 2\n", "c.yaml")

    def test_unknown_section_line(self):
        with pytest.raises(ConfigError, match=r"c\.yaml:2: unknown section"):
            parse_config("seed: 1\nlosses: {}\n", "c.yaml")

    def test_bad_type_line(self):
        with pytest.raises(ConfigError, match=r"c\.yaml:3: toy\.steps must be an integer"):
            parse_config("toy:\n  emb_dim: 8\n  steps: many\n", "c.yaml")

    def test_invalid_value_names_key_line(self):
        with pytest.raises(ConfigError, match=r"c\.yaml:3: loss"):
            parse_config("loss:\n  lam: 0.7\n  eta: -1.0\n", "c.yaml")

    def test_yaml_syntax_error_line(self):
        # the parser notices the unclosed list at end of input
        with pytest.raises(ConfigError, match=r"c\.yaml:3: invalid YAML"):
            parse_config("seed: 1\nloss: [1,\n", "c.yaml")

    def test_overrides(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("toy:\n  steps: 100\n")
        cfg = load_config(p, ["toy.steps=7", "seed=3", "pipeline.patch_shape=[32, 24, 32]"])
        assert cfg.toy.steps == 7 and cfg.seed == 3 and cfg.pipeline.patch_shape == (32, 24, 32)

    def test_bad_override_blamed(self):
        with pytest.raises(ConfigError, match="command-line override"):
            load_config(None, ["toy.steps=1.5"])
        with pytest.raises(ConfigError, match="section.key=value"):
            load_config(None, ["toy.steps"])

    def test_synthetic_seed_hidden(self):
        with pytest.raises(ConfigError, match="unknown key synthetic.seed"):
            parse_config("synthetic:\n  seed: 3\n")

    def test_dump_round_trip(self):
        cfg = load_config(None, ["loss.eta=3.0", "evaluation.size_bins_cm3=[0, 5, 10]"])
        assert parse_config(dump_config(cfg)) == cfg
