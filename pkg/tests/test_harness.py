import csv
import json

import numpy as np
import pytest

from ssimadv import harness as H
from ssimadv.attacks import AttackOutcome, EnetConfig, PgdConfig, SsimAttackConfig
from ssimadv.data import Dataset

from conftest import tiny_model


def outcome(attack, image_id, success, ssim, img=None):
    img = np.full((2, 2, 1), 0.5) if img is None else img
    return AttackOutcome(success, img, ssim, 1.0, 0.5, 0.25, 0, 1 if success else 0,
                         0.01, 10, attack, image_id)


def dataset(model, rng, n=12):
    images = rng.random((n, 6, 6, 1))
    labels = model.predict(images)
    labels[[2, 5]] = (labels[[2, 5]] + 1) % 3  # two misclassified images
    return Dataset(images, labels)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_empty_report_writes_headers_only(tmp_path):
    report = H.build_report([], attacks=[])
    H.emit_report(report, tmp_path, outcomes=[])
    assert read_rows(tmp_path / "outcomes.csv") == [H.OUTCOME_HEADER]
    assert read_rows(tmp_path / "tail_curve.csv") == [H.TAIL_HEADER]
    assert json.loads((tmp_path / "summary.json").read_text())["images"] == 0


def test_csv_number_format(tmp_path):
    o = outcome("enet", 0, True, 0.39)
    o.l1 = 1 / 3
    H.write_outcomes_csv(tmp_path / "o.csv", [o])
    row = read_rows(tmp_path / "o.csv")[1]
    assert row[4] == "true" and row[5] == "0.39" and row[6] == "0.333333"
    back = H.read_outcomes_csv(tmp_path / "o.csv")[0]
    assert back["success"] is True and back["ssim"] == 0.39 and back["image_id"] == 0


def test_pgm_mid_gray_byte(tmp_path):
    H.write_pnm(tmp_path / "g.pgm", np.full((2, 3, 1), 0.5))
    raw = (tmp_path / "g.pgm").read_bytes()
    assert raw.startswith(b"P5\n3 2\n255\n") and raw[-6:] == bytes([128] * 6)
    assert H.read_pnm(tmp_path / "g.pgm").shape == (2, 3, 1)
    H.write_pnm(tmp_path / "c.ppm", np.zeros((1, 1, 3)))
    assert (tmp_path / "c.ppm").read_bytes().startswith(b"P6")


def test_tail_curve_hand_example():
    # ssim values -0.2 (counts at 0), 0.5, 0.95; the middle one failed
    tail = dict((t, (sr, p)) for t, sr, p in H.tail_curve([True, False, True], [-0.2, 0.5, 0.95], 3))
    assert tail[0.0] == (2 / 3, 1.0)
    assert tail[0.05] == (1 / 3, 2 / 3)
    assert tail[0.5] == (1 / 3, 2 / 3)
    assert tail[0.95] == (1 / 3, 1 / 3)
    assert tail[1.0] == (0.0, 0.0)


def test_tail_curve_monotone(rng):
    for _ in range(50):
        n = int(rng.integers(1, 40))
        tail = H.tail_curve(rng.random(n) < 0.7, rng.uniform(-1, 1, n), n)
        sr = [t[1] for t in tail]
        prop = [t[2] for t in tail]
        assert all(a >= b for a, b in zip(sr, sr[1:]))
        assert all(a >= b for a, b in zip(prop, prop[1:]))
        assert all(s <= p for s, p in zip(sr, prop))


def test_summary_averages_successes_only():
    rows = [outcome("x", 0, True, 0.8), outcome("x", 1, False, 0.1), outcome("x", 2, True, 0.6)]
    s = H.summarize("x", rows)
    assert s.attacked == 3 and s.successes == 2
    assert s.mean_ssim == pytest.approx(0.7) and s.min_ssim == 0.6 and s.median_ssim == pytest.approx(0.7)
    assert H.summarize("x", [outcome("x", 0, False, 0.1)]).mean_ssim is None


def test_identity_attack_never_succeeds(rng):
    m = tiny_model(3)
    ds = dataset(m, rng)
    cfg = H.CampaignConfig(attacks=("pgd", "pgd-ssim"), pgd=PgdConfig(epsilon=0.0))
    report, outs = H.run_campaign(m, ds, cfg)
    attacked = [o for o in outs if o.attack != H.SKIPPED]
    assert attacked and not any(o.success for o in attacked)
    for o in attacked:
        np.testing.assert_array_equal(o.adversarial, ds.images[o.image_id])
        assert o.ssim == 1.0
    assert report.summaries["pgd"].success_rate == 0.0
    assert report.summaries["pgd"].tail[0] == (0.0, 0.0, 1.0)


def test_campaign_accounting(rng, tmp_path):
    m = tiny_model(3)
    ds = dataset(m, rng)
    cfg = H.CampaignConfig(
        attacks=("pgd", "enet", "ssim", "ssim-e"),
        enet=EnetConfig(iterations=15, search_steps=2),
        ssim=SsimAttackConfig(iterations=15, search_steps=2),
        limit=6,
        batch_size=4,
    )
    report, outs = H.run_campaign(m, ds, cfg)
    assert report.errors == []
    skipped = [o.image_id for o in outs if o.attack == H.SKIPPED]
    assert skipped == [2, 5]
    attacked_ids = sorted({o.image_id for o in outs if o.attack != H.SKIPPED})
    assert len(attacked_ids) == 6 and 2 not in attacked_ids
    assert len(outs) == 6 * 4 + 2
    assert [o.image_id for o in outs] == sorted(o.image_id for o in outs)
    for s in report.summaries.values():
        assert s.attacked == 6 and 0 <= s.successes <= 6
    for o in outs:
        if o.attack != H.SKIPPED:
            assert o.success == (m.predict(o.adversarial) != ds.labels[o.image_id])
            assert 0 <= o.adversarial.min() and o.adversarial.max() <= 1

    H.emit_report(report, tmp_path, outs, ds.images)
    rows = H.read_outcomes_csv(tmp_path / "outcomes.csv")
    tail = read_rows(tmp_path / "tail_curve.csv")[1:]
    for name in cfg.attacks:
        mine = [r for r in rows if r["attack"] == name]
        first = next(t for t in tail if t[0] == name and t[1] == "0.00")
        assert float(first[2]) * len(mine) == pytest.approx(sum(r["success"] for r in mine))
        assert float(first[3]) == 1.0
    again = H.build_report(rows)
    for name, s in report.summaries.items():
        assert (again.summaries[name].attacked, again.summaries[name].successes) == (s.attacked, s.successes)
    assert (again.images, again.skipped) == (report.images, report.skipped) == (8, 2)


def test_exhibits_and_adversarial_archive(tmp_path):
    outs = [outcome("enet", i, True, s, np.full((2, 2, 1), s)) for i, s in enumerate([0.9, 0.3, 0.6])]
    outs.append(outcome("enet", 3, False, 0.1))
    originals = np.zeros((4, 2, 2, 1))
    stems = H.dump_exhibits(tmp_path, outs, originals, k=2)
    assert stems == ["enet_0_img1", "enet_1_img2"]
    assert (tmp_path / "enet_0_img1_adv.pgm").exists() and (tmp_path / "enet_0_img1_orig.pgm").exists()
    H.save_adversarials(tmp_path / "a.npz", outs)
    first = (tmp_path / "a.npz").read_bytes()
    H.save_adversarials(tmp_path / "a.npz", outs)
    assert (tmp_path / "a.npz").read_bytes() == first
    back = H.load_adversarials(tmp_path / "a.npz")
    np.testing.assert_array_equal(back[("enet", 1)], outs[1].adversarial)


def test_campaign_config_validation():
    with pytest.raises(ValueError):
        H.CampaignConfig(attacks=("fgsm",))
    with pytest.raises(ValueError):
        H.CampaignConfig(limit=-1)
