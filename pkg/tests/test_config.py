import json

import pytest

from voidseg.config import ConfigError, RunConfig, load_config, parse_pairs
from voidseg.manifest import ManifestError, merge_manifests, read_manifest, write_manifest


class TestConfig:
    def test_defaults(self):
        cfg = RunConfig()
        assert cfg.get("extraction.sca") == 5.0
        assert cfg.get("extraction.search_range") == 5
        assert cfg.get("label.thr_min") == 6.0
        assert cfg.get("synth.I_max") == 20000
        assert (cfg.get("synth.VR_min"), cfg.get("synth.VR_max")) == (2, 7)
        assert cfg.get("train.lr") == 1e-3 and cfg.get("train.batch_size") == 256
        assert cfg.get("post.a_min") == 9 and cfg.get("post.iou_min") == 0.3

    def test_dump_round_trip(self, tmp_path):
        cfg = RunConfig()
        cfg.set("synth.VC_max", "3")
        cfg.set("train.max_minutes", "12.5")
        path = cfg.write(tmp_path / "c.txt")
        again = load_config(path)
        assert again.dump() == cfg.dump()
        assert again.get("synth.VC_max") == 3 and again.get("train.max_minutes") == 12.5

    def test_overrides_win(self, tmp_path):
        (tmp_path / "c.txt").write_text("synth.VR_max=6  # comment\n\n")
        cfg = load_config(tmp_path / "c.txt", ["synth.VR_max=5"])
        assert cfg.get("synth.VR_max") == 5

    def test_default_section(self):
        cfg = load_config(None, ["VC_max=2"], default_section="synth")
        assert cfg.get("synth.VC_max") == 2

    def test_types(self):
        cfg = RunConfig()
        cfg.set("synth.resample_empty", "yes")
        assert cfg.get("synth.resample_empty") is True
        cfg.set("train.target_val_loss", "none")
        assert cfg.get("train.target_val_loss") is None

    @pytest.mark.parametrize(
        "pair",
        ["synth.bogus=1", "nosuch.key=1", "VR_max=3", "synth.VC_max=abc", "train.lr=0", "extraction.sca=-1"],
    )
    def test_errors(self, pair):
        with pytest.raises((ConfigError, ValueError)):
            load_config(None, [pair])

    def test_bad_line(self):
        with pytest.raises(ConfigError):
            parse_pairs("just words")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.txt")


def rec(i, split="train", **kw):
    return {"id": f"s{i}", "image": f"images/s{i}.png", "split": split, "origin": "synthetic", **kw}


class TestManifest:
    def test_round_trip(self, tmp_path):
        path = write_manifest([rec(0), rec(1, "test", label="void")], tmp_path / "m.jsonl")
        assert [r["id"] for r in read_manifest(path)] == ["s0", "s1"]

    @pytest.mark.parametrize(
        "bad",
        [
            {"id": "a", "image": "x", "split": "train"},
            {"id": "a", "image": "x", "split": "dev", "origin": "real"},
            {"id": "a", "image": "x", "split": "train", "origin": "fake"},
            {"id": "a", "image": "x", "split": "train", "origin": "real", "label": "maybe"},
        ],
    )
    def test_invalid_records(self, tmp_path, bad):
        (tmp_path / "m.jsonl").write_text(json.dumps(bad) + "\n")
        with pytest.raises(ManifestError):
            read_manifest(tmp_path / "m.jsonl")

    def test_duplicate_ids(self, tmp_path):
        with pytest.raises(ManifestError):
            write_manifest([rec(0), rec(0)], tmp_path / "m.jsonl")

    def test_missing_files_checked(self, tmp_path):
        path = write_manifest([rec(0)], tmp_path / "m.jsonl")
        read_manifest(path)
        with pytest.raises(ManifestError, match="missing"):
            read_manifest(path, check_files=True)

    def test_bad_json(self, tmp_path):
        (tmp_path / "m.jsonl").write_text("{not json\n")
        with pytest.raises(ManifestError, match="m.jsonl:1"):
            read_manifest(tmp_path / "m.jsonl")

    def test_merge_rewrites_paths(self, tmp_path):
        a = write_manifest([rec(0)], tmp_path / "a" / "m.jsonl")
        b = write_manifest([rec(1, "test")], tmp_path / "b" / "m.jsonl")
        out = merge_manifests([a, b], tmp_path / "all.jsonl")
        recs = read_manifest(out)
        assert [r["image"] for r in recs] == ["a/images/s0.png", "b/images/s1.png"]
