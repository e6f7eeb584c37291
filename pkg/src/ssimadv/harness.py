"""Attack campaigns over a dataset, aggregate metrics, and report files."""

import csv
import io
import json
import logging
import zipfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .attacks import (
    AttackOutcome,
    EnetConfig,
    PgdConfig,
    SsimAttackConfig,
    enet_attack_batch,
    enet_search,
    pgd_attack_batch,
    ssim_attack_batch,
)
from .data import Dataset

logger = logging.getLogger(__name__)

ATTACKS = ("pgd", "pgd-ssim", "enet", "ssim", "ssim-e")
SKIPPED = "skipped"
TAIL_THRESHOLDS = tuple(round(0.05 * k, 2) for k in range(21))
OUTCOME_HEADER = ["image_id", "attack", "true_label", "adv_label", "success",
                  "ssim", "l1", "l2", "linf", "c_final", "iterations"]
TAIL_HEADER = ["attack", "ssim_min", "success_rate", "proportion"]
EXHIBITS = 9


@dataclass
class CampaignConfig:
    attacks: Sequence[str] = ATTACKS
    pgd: PgdConfig = field(default_factory=PgdConfig)
    enet: EnetConfig = field(default_factory=EnetConfig)
    ssim: SsimAttackConfig = field(default_factory=SsimAttackConfig)
    limit: Optional[int] = None
    batch_size: int = 200
    shuffle: bool = False

    def __post_init__(self):
        unknown = [a for a in self.attacks if a not in ATTACKS]
        if unknown:
            raise ValueError(f"unknown attack(s) {unknown}; choose from {list(ATTACKS)}")
        if self.limit is not None and self.limit < 0:
            raise ValueError("limit must be non-negative")


@dataclass
class AttackSummary:
    attack: str
    attacked: int
    successes: int
    success_rate: float
    mean_l1: Optional[float]
    mean_l2: Optional[float]
    mean_linf: Optional[float]
    mean_ssim: Optional[float]
    median_ssim: Optional[float]
    min_ssim: Optional[float]
    tail: list  # [(ssim_min, success_rate, proportion), ...]


@dataclass
class EvalReport:
    summaries: dict
    images: int = 0
    skipped: int = 0
    seed: int = 0
    errors: list = field(default_factory=list)

    def to_dict(self):
        d = asdict(self)
        d["summaries"] = {k: asdict(v) for k, v in self.summaries.items()}
        return d


def tail_curve(success, ssims, attacked, thresholds=TAIL_THRESHOLDS):
    """Success rate and proportion of images with SSIM at or above each threshold.

    Negative SSIM values count at threshold 0, so the first point is the
    unconstrained success rate.
    """
    success = np.asarray(success, dtype=bool)
    s = np.maximum(np.asarray(ssims, dtype=np.float64), 0.0)
    out = []
    for t in thresholds:
        keep = s >= t
        if attacked:
            out.append((t, int((keep & success).sum()) / attacked, int(keep.sum()) / attacked))
        else:
            out.append((t, 0.0, 0.0))
    return out


def _mean(v):
    return float(np.mean(v)) if len(v) else None


def summarize(attack, rows) -> AttackSummary:
    """Aggregate outcome rows (dicts or :class:`AttackOutcome`) of one attack."""
    get = (lambda r, k: r[k]) if rows and isinstance(rows[0], dict) else getattr
    success = np.array([bool(get(r, "success")) for r in rows], dtype=bool)
    ssims = np.array([float(get(r, "ssim")) for r in rows])
    norms = np.array([[float(get(r, k)) for k in ("l1", "l2", "linf")] for r in rows]).reshape(-1, 3)
    ok_ssim, ok_norms = ssims[success], norms[success]
    n = len(rows)
    return AttackSummary(
        attack=attack,
        attacked=n,
        successes=int(success.sum()),
        success_rate=int(success.sum()) / n if n else 0.0,
        mean_l1=_mean(ok_norms[:, 0]),
        mean_l2=_mean(ok_norms[:, 1]),
        mean_linf=_mean(ok_norms[:, 2]),
        mean_ssim=_mean(ok_ssim),
        median_ssim=float(np.median(ok_ssim)) if len(ok_ssim) else None,
        min_ssim=float(ok_ssim.min()) if len(ok_ssim) else None,
        tail=tail_curve(success, ssims, n),
    )


def select_images(model, dataset: Dataset, limit=None, seed=0, shuffle=False, batch=500):
    """Pick images to attack: the first ``limit`` correctly classified ones.

    Returns ``(eligible_ids, skipped_ids, clean_predictions)``; skipped ids are
    the misclassified images met before the limit was reached.
    """
    order = np.arange(len(dataset))
    if shuffle:
        order = np.random.default_rng(seed).permutation(order)
    preds = np.concatenate([model.predict(dataset.images[i:i + batch])
                            for i in range(0, len(dataset), batch)]) if len(dataset) else np.zeros(0, int)
    eligible, skipped = [], []
    for i in order:
        if limit is not None and len(eligible) >= limit:
            break
        (eligible if preds[i] == dataset.labels[i] else skipped).append(int(i))
    return eligible, skipped, preds


def _run_chunk(model, name, x, labels, cfg: CampaignConfig, cache):
    if name in ("pgd", "pgd-ssim"):
        return pgd_attack_batch(model, x, labels, cfg.pgd, filter_ssim=name == "pgd-ssim")
    if name in ("enet", "ssim-e") and "enet" not in cache:
        cache["enet"] = enet_search(model, x, labels, cfg.enet)
    if name == "enet":
        return enet_attack_batch(model, x, labels, cfg.enet, search=cache["enet"])
    if name == "ssim":
        return ssim_attack_batch(model, x, labels, replace(cfg.ssim, init="zero"))
    return ssim_attack_batch(model, x, labels, replace(cfg.ssim, init="enet"),
                             cfg.enet, enet_result=cache["enet"])


def run_campaign(model, dataset: Dataset, cfg: CampaignConfig = CampaignConfig(), seed=0):
    """Attack the correctly classified images of ``dataset`` with every configured attack.

    Returns ``(report, outcomes)``; ``outcomes`` is ordered by image id, then
    by attack order, and includes ``skipped`` records for misclassified
    clean images.  Attack failures are logged into ``report.errors`` and do
    not stop the campaign.
    """
    if tuple(dataset.images.shape[1:]) != model.input_shape:
        raise ValueError(f"dataset images {dataset.images.shape[1:]} do not fit model input {model.input_shape}")
    eligible, skipped, preds = select_images(model, dataset, cfg.limit, seed, cfg.shuffle)
    errors = []
    by_image = {i: [] for i in eligible}

    for start in range(0, len(eligible), cfg.batch_size):
        ids = eligible[start:start + cfg.batch_size]
        x = dataset.images[ids]
        labels = dataset.labels[ids]
        cache = {}
        for name in cfg.attacks:
            logger.info("%s on images %d..%d", name, ids[0], ids[-1])
            try:
                outs = _run_chunk(model, name, x, labels, cfg, cache)
            except Exception as exc:  # recorded, not fatal
                logger.exception("attack %s failed", name)
                errors.extend({"image_id": i, "attack": name, "error": repr(exc)} for i in ids)
                continue
            for i, o in zip(ids, outs):
                o.attack, o.image_id = name, i
                by_image[i].append(o)

    outcomes = []
    for i in sorted(set(eligible) | set(skipped)):
        if i in by_image:
            outcomes.extend(by_image[i])
        else:
            x = dataset.images[i]
            outcomes.append(AttackOutcome(False, x, 1.0, 0.0, 0.0, 0.0, int(dataset.labels[i]),
                                          int(preds[i]), None, 0, SKIPPED, i))
    report = build_report(outcomes, cfg.attacks, seed)
    report.errors = errors
    return report, outcomes


def build_report(rows, attacks=None, seed=0) -> EvalReport:
    get = (lambda r, k: r[k]) if rows and isinstance(rows[0], dict) else getattr
    if attacks is None:
        attacks = []
        for r in rows:
            a = get(r, "attack")
            if a != SKIPPED and a not in attacks:
                attacks.append(a)
    summaries = {a: summarize(a, [r for r in rows if get(r, "attack") == a]) for a in attacks}
    images = len({int(get(r, "image_id")) for r in rows})
    skipped = sum(1 for r in rows if get(r, "attack") == SKIPPED)
    return EvalReport(summaries, images, skipped, seed)


# ---------------------------------------------------------------------------
# report files


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.6g}"


def outcome_row(o: AttackOutcome):
    return [o.image_id, o.attack, o.true_label, o.adv_label, bool(o.success),
            o.ssim, o.l1, o.l2, o.linf, o.c_final, o.iterations]


def write_outcomes_csv(path, outcomes):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OUTCOME_HEADER)
        for o in outcomes:
            w.writerow([_fmt(v) for v in outcome_row(o)])


def read_outcomes_csv(path):
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append({
                "image_id": int(r["image_id"]),
                "attack": r["attack"],
                "true_label": int(r["true_label"]),
                "adv_label": int(r["adv_label"]),
                "success": r["success"] == "true",
                "ssim": float(r["ssim"]),
                "l1": float(r["l1"]),
                "l2": float(r["l2"]),
                "linf": float(r["linf"]),
                "c_final": float(r["c_final"]) if r["c_final"] else None,
                "iterations": int(r["iterations"]),
            })
    return rows


def write_tail_csv(path, report: EvalReport):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TAIL_HEADER)
        for name, s in report.summaries.items():
            for t, sr, prop in s.tail:
                w.writerow([name, f"{t:.2f}", _fmt(sr), _fmt(prop)])


def to_bytes(img):
    """Pixel values in [0, 1] to 8-bit with round-half-up."""
    return np.floor(np.clip(np.asarray(img, dtype=np.float64), 0, 1) * 255.0 + 0.5).astype(np.uint8)


def write_pnm(path, img):
    """Binary PGM (1 channel) or PPM (3 channels)."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[..., None]
    h, w, c = img.shape
    if c not in (1, 3):
        raise ValueError("PNM needs 1 or 3 channels")
    magic = b"P5" if c == 1 else b"P6"
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode())
        fh.write(to_bytes(img).tobytes())


def read_pnm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    magic, w, h, maxval = parts[0], int(parts[1]), int(parts[2]), int(parts[3])
    c = 1 if magic == b"P5" else 3
    data = np.frombuffer(parts[4], dtype=np.uint8, count=w * h * c)
    return data.reshape(h, w, c)


def dump_exhibits(outdir, outcomes, originals, k=EXHIBITS):
    """Write the ``k`` lowest-SSIM successful images per attack next to their originals."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    attacks = sorted({o.attack for o in outcomes if o.attack != SKIPPED})
    for name in attacks:
        ok = sorted((o for o in outcomes if o.attack == name and o.success),
                    key=lambda o: (o.ssim, o.image_id))[:k]
        for rank, o in enumerate(ok):
            ext = "pgm" if o.adversarial.shape[-1] == 1 else "ppm"
            stem = f"{name}_{rank}_img{o.image_id}"
            write_pnm(outdir / f"{stem}_adv.{ext}", o.adversarial)
            write_pnm(outdir / f"{stem}_orig.{ext}", originals[o.image_id])
            written.append(stem)
    return written


def emit_report(report: EvalReport, outdir, outcomes=None, originals=None, k=EXHIBITS):
    """Write ``outcomes.csv``, ``tail_curve.csv``, ``summary.json`` and image exhibits."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    files = {}
    if outcomes is not None:
        files["outcomes"] = outdir / "outcomes.csv"
        write_outcomes_csv(files["outcomes"], outcomes)
    files["tail_curve"] = outdir / "tail_curve.csv"
    write_tail_csv(files["tail_curve"], report)
    files["summary"] = outdir / "summary.json"
    files["summary"].write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    if outcomes is not None and originals is not None and k > 0:
        dump_exhibits(outdir / "images", outcomes, originals, k)
        files["images"] = outdir / "images"
    return files


def load_adversarials(path):
    """Inverse of ``save_adversarials``: {(attack, image_id): image}."""
    out = {}
    with np.load(path) as npz:
        for key in npz.files:
            attack, image_id = key.rsplit("/", 1)
            out[(attack, int(image_id))] = npz[key]
    return out


def save_adversarials(path, outcomes):
    """Keep returned images so ``report`` can redraw exhibits later."""
    # written by hand with a fixed zip timestamp so reruns are byte-identical
    with zipfile.ZipFile(path, "w") as zf:
        for o in outcomes:
            if o.attack == SKIPPED:
                continue
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(o.adversarial), allow_pickle=False)
            info = zipfile.ZipInfo(f"{o.attack}/{o.image_id}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, buf.getvalue())


def format_table(report: EvalReport) -> str:
    lines = [f"{'attack':<10}{'n':>6}{'success':>9}{'L1':>9}{'L2':>8}{'Linf':>7}{'SSIM':>7}{'minSSIM':>9}"]

    def f(v, w, p):
        return f"{'-':>{w}}" if v is None else f"{v:>{w}.{p}f}"

    for s in report.summaries.values():
        lines.append(f"{s.attack:<10}{s.attacked:>6}{100 * s.success_rate:>8.1f}%"
                     f"{f(s.mean_l1, 9, 2)}{f(s.mean_l2, 8, 2)}{f(s.mean_linf, 7, 2)}"
                     f"{f(s.mean_ssim, 7, 3)}{f(s.min_ssim, 9, 3)}")
    return "\n".join(lines)
