import json

import numpy as np
import pytest

from voidseg.groundtruth import (
    AUTO_LOG,
    MANUAL_MASK,
    NON_VOID,
    VOID,
    LabelConfig,
    classify_ball,
    contours_from_log,
    estimate_ball_disc,
    import_manual_masks,
    label_crops,
    region_intensities,
    write_labels,
)
from voidseg.imaging import disc_mask, save_image, save_mask
from voidseg.synth import SynthConfig, VoidParams, generate_dataset, render_voids, synthesize_crop_pool

BALL = (32.0, 32.0, 20.0)


def flat_ball(level=150, background=40):
    img = np.full((64, 64), background, np.uint8)
    img[disc_mask((64, 64), *BALL)] = level
    return img


def with_void(img, x, y, r, offset):
    out = img.copy()
    m = disc_mask(img.shape, x, y, r)
    out[m] = out[m] + offset
    return out, m


class TestValidity:
    @pytest.mark.parametrize("offset,valid", [(5, False), (6, True), (7, True)])
    def test_threshold_boundary(self, offset, valid):
        crop, m = with_void(flat_ball(), 30, 31, 4, offset)
        lab = classify_ball(crop, BALL, mask=m)
        assert lab.regions[0].contrast == pytest.approx(offset)
        assert lab.regions[0].valid is valid
        assert lab.cls == (VOID if valid else NON_VOID)

    def test_background_excludes_other_voids(self):
        crop, m1 = with_void(flat_ball(), 26, 32, 3, 10)
        crop, m2 = with_void(crop, 33, 32, 3, 40)  # bright neighbour inside the ring
        _, i_bg = region_intensities(crop, m1, disc_mask((64, 64), *BALL), others=m2)
        assert i_bg == pytest.approx(150)

    def test_background_stays_inside_ball(self):
        crop, m = with_void(flat_ball(), 32, 49, 3, 10)  # ring touches the rim
        _, i_bg = region_intensities(crop, m, disc_mask((64, 64), *BALL))
        assert i_bg == pytest.approx(150)

    def test_ring_width(self):
        # gradient background: wider rings average further out
        crop = flat_ball().astype(float)
        m = disc_mask((64, 64), 32, 32, 3)
        d = np.hypot(*(np.mgrid[:64, :64] - 32))
        crop = np.clip(crop + np.where(d < 10, 10 - d, 0), 0, 255)
        a = region_intensities(crop, m, disc_mask((64, 64), *BALL), ring_width=1)[1]
        b = region_intensities(crop, m, disc_mask((64, 64), *BALL), ring_width=5)[1]
        assert a > b


class TestAutoLabel:
    def test_clear_void_detected(self):
        crop, _ = with_void(flat_ball(), 28, 34, 5, 25)
        lab = classify_ball(crop, BALL)
        assert lab.source == AUTO_LOG
        assert lab.cls == VOID
        (reg,) = lab.valid_regions
        ys, xs = np.nonzero(reg.mask)
        assert abs(xs.mean() - 28) < 1 and abs(ys.mean() - 34) < 1

    def test_plain_ball_is_non_void(self):
        assert classify_ball(flat_ball(), BALL).cls == NON_VOID

    def test_rim_does_not_respond(self):
        assert contours_from_log(flat_ball(), BALL) == []

    def test_faint_blob_rejected(self):
        crop, _ = with_void(flat_ball(), 30, 30, 5, 3)
        assert classify_ball(crop, BALL).cls == NON_VOID

    def test_synthetic_void_flat_layer(self):
        # blur 0 and noise 0: I_void - I_BG equals the void intensity exactly
        crop = flat_ball()
        p = VoidParams(1, [5], [8], [0.0], [0.0], [30.0], [33.0])
        s = render_voids(crop, BALL, p, np.random.default_rng(0))
        lab = classify_ball(s.image, BALL, mask=s.mask)
        assert lab.regions[0].contrast == pytest.approx(8.0)
        assert lab.cls == VOID

    def test_estimate_disc(self):
        cx, cy, r = estimate_ball_disc(flat_ball())
        assert abs(cx - 32) < 0.2 and abs(cy - 32) < 0.2 and abs(r - 20) < 0.8

    def test_generated_positives_mostly_valid(self):
        # with the default ranges most kept voids clear Thr_min at their core
        pool = synthesize_crop_pool(10, seed=2, noise_sigma=0.0)
        samples = generate_dataset(pool, SynthConfig(I_max=80, master_seed=5, VB_min=0, VB_max=0))
        for s in samples:
            if s.mask.any():
                c = pool[s.source_index]
                lab = classify_ball(s.image, (c.cx, c.cy, c.ball.r), mask=s.mask)
                # merged overlapping voids can only add intensity
                assert all(r.contrast >= 6 - 1.5 for r in lab.regions)


class TestManualMasks:
    def setup_dirs(self, tmp_path):
        crops, masks = tmp_path / "crops", tmp_path / "masks"
        crop, m = with_void(flat_ball(), 30, 30, 4, 20)
        save_image(crop, crops / "a.png")
        save_image(flat_ball(), crops / "b.png")
        save_mask(m, masks / "a.png")
        return crops, masks

    def test_import(self, tmp_path):
        crops, masks = self.setup_dirs(tmp_path)
        labels = import_manual_masks(crops, masks)
        assert [lab.ball_id for lab in labels] == ["a"]  # b has no mask: skipped
        assert labels[0].cls == VOID and labels[0].source == MANUAL_MASK

    def test_orphan_mask(self, tmp_path):
        crops, masks = self.setup_dirs(tmp_path)
        save_mask(np.zeros((64, 64), bool), masks / "zzz.png")
        with pytest.raises(ValueError, match="zzz"):
            import_manual_masks(crops, masks)

    def test_size_mismatch(self, tmp_path):
        crops, masks = self.setup_dirs(tmp_path)
        save_mask(np.zeros((32, 32), bool), masks / "b.png")
        with pytest.raises(ValueError, match="size"):
            import_manual_masks(crops, masks)

    def test_label_dir_and_write(self, tmp_path):
        crops, _ = self.setup_dirs(tmp_path)
        labels = label_crops(crops)
        assert [lab.cls for lab in labels] == [VOID, NON_VOID]
        out = write_labels(labels, tmp_path / "labels.jsonl")
        recs = [json.loads(line) for line in open(out)]
        assert recs[0]["class"] == VOID and recs[0]["regions"][0]["valid"]

    def test_custom_threshold(self):
        crop, m = with_void(flat_ball(), 30, 31, 4, 8)
        assert classify_ball(crop, BALL, mask=m, cfg=LabelConfig(thr_min=10)).cls == NON_VOID
