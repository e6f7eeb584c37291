"""Command line entry point: ``ssimadv {prepare-data,train,attack,report,selftest}``.

Every long flag has a matching key in the ``--config`` JSON file (dashes may
be written as underscores).  Flags given on the command line win over the
file, and the file wins over built-in defaults.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from types import SimpleNamespace

from . import data as D
from . import harness as H
from . import model as M
from .attacks import EnetConfig, PgdConfig, SsimAttackConfig
from .metrics import ConstraintThresholds

log = logging.getLogger("ssimadv")

USAGE_ERROR = 2
DATA_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

# Built-in defaults.  argparse defaults stay None so we can tell which flags
# were actually typed.
DEFAULTS = {
    "seed": 0,
    "out": "out",
    "log_level": "info",
    "data_dir": None,
    "train_images": None,
    "train_labels": None,
    "test_images": None,
    "test_labels": None,
    "model": None,
    # train
    "arch": "desk",
    "epochs": 100,
    "batch_size": 50,
    "learning_rate": 0.01,
    "momentum": 0.9,
    "pgd_steps": 10,
    "clean_only": False,
    "train_per_class": 200,
    "test_per_class": 50,
    # attack
    "attacks": ",".join(H.ATTACKS),
    "limit": 200,
    "epsilon": 0.3,
    "zeta1": 0.9,
    "zeta2": 0.9,
    "search_steps": 9,
    "iters": 1000,
    "beta": 0.01,
    "enet_lr": 0.01,
    "step_size": 0.01,
    "dual_lr": 10.0,
    "kappa": 0.0,
    "exhibits": H.EXHIBITS,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p):
    p.add_argument("--config", help="JSON file whose keys mirror the long flags")
    p.add_argument("--seed", type=int, help="u64 seed (default 0)")
    p.add_argument("--out", help="output directory (default ./out)")
    p.add_argument("--log-level", choices=["debug", "info", "warning", "error"])


def _data(p, train=False):
    p.add_argument("--data-dir", help="directory holding the four MNIST IDX files")
    if train:
        p.add_argument("--train-images")
        p.add_argument("--train-labels")
    p.add_argument("--test-images")
    p.add_argument("--test-labels")


def build_parser():
    p = _Parser(prog="ssimadv", description="SSIM-constrained adversarial attack workbench")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("prepare-data", help="write the bundled MNIST subset as IDX files")
    _common(s)
    s.add_argument("--train-per-class", type=int)
    s.add_argument("--test-per-class", type=int)

    s = sub.add_parser("train", help="adversarially train a classifier")
    _common(s)
    _data(s, train=True)
    s.add_argument("--model", help="checkpoint path to write (default OUT/model.ckpt)")
    s.add_argument("--arch", choices=sorted(M.ARCHITECTURES))
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--learning-rate", type=float)
    s.add_argument("--momentum", type=float)
    s.add_argument("--epsilon", type=float, help="PGD radius used for training")
    s.add_argument("--pgd-steps", type=int)
    s.add_argument("--clean-only", action="store_const", const=True, help="skip adversarial examples")

    s = sub.add_parser("attack", help="run an attack campaign and write reports")
    _common(s)
    _data(s)
    s.add_argument("--model", help="checkpoint to attack (default OUT/model.ckpt)")
    s.add_argument("--attacks", help="comma list from " + ",".join(H.ATTACKS))
    s.add_argument("--limit", type=int, help="attack the first n correctly classified images")
    s.add_argument("--epsilon", type=float, help="PGD radius")
    s.add_argument("--zeta1", type=float, help="luminance threshold in [0, 1]")
    s.add_argument("--zeta2", type=float, help="structure threshold in [0, 1]")
    s.add_argument("--search-steps", type=int, help="binary search rounds over c")
    s.add_argument("--iters", type=int, help="iterations per ENet / SSIM run")
    s.add_argument("--beta", type=float, help="ENet L1 weight")
    s.add_argument("--enet-lr", type=float)
    s.add_argument("--step-size", type=float, help="SSIM primal step size")
    s.add_argument("--dual-lr", type=float, help="Adam step size for the multipliers")
    s.add_argument("--kappa", type=float)
    s.add_argument("--exhibits", type=int, help="images dumped per attack")

    s = sub.add_parser("report", help="rebuild tail curve and summary from OUT/outcomes.csv")
    _common(s)
    _data(s)
    s.add_argument("--exhibits", type=int)

    s = sub.add_parser("selftest", help="run the invariant suites")
    _common(s)
    return p


def resolve(args):
    """Merge defaults, config file and explicit flags into one namespace."""
    explicit = {k: v for k, v in vars(args).items() if v is not None and k not in ("config", "command")}
    allowed = set(explicit) | {k for k in vars(args) if k not in ("config", "command")}
    merged = dict(DEFAULTS)
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise UsageError("config must be a JSON object")
        for key, value in cfg.items():
            k = key.replace("-", "_")
            if k not in allowed:
                raise UsageError(f"config key {key!r} is not a flag of '{args.command}'")
            merged[k] = value
    merged.update(explicit)
    if isinstance(merged["attacks"], (list, tuple)):
        merged["attacks"] = ",".join(merged["attacks"])
    ns = SimpleNamespace(command=args.command, **merged)
    if not 0 <= int(ns.seed) < 2**64:
        raise UsageError("seed must fit in an unsigned 64-bit integer")
    return ns


def _paths(ns, keys):
    out = {}
    for k in keys:
        v = getattr(ns, k)
        if v is None and ns.data_dir is not None:
            v = str(Path(ns.data_dir) / DATA_FILES[k])
        if v is None:
            raise UsageError(f"--{k.replace('_', '-')} (or --data-dir) is required")
        out[k] = v
    return out


def _model_path(ns):
    return Path(ns.model) if ns.model else Path(ns.out) / "model.ckpt"


def _validated(build, ns):
    try:
        return build(ns)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def train_config(ns):
    return M.TrainConfig(epochs=int(ns.epochs), batch_size=int(ns.batch_size),
                         learning_rate=float(ns.learning_rate), momentum=float(ns.momentum),
                         adversarial=not ns.clean_only, pgd_steps=int(ns.pgd_steps),
                         pgd_epsilon=float(ns.epsilon), seed=int(ns.seed))


def campaign_config(ns):
    attacks = tuple(a.strip() for a in str(ns.attacks).split(",") if a.strip())
    return H.CampaignConfig(
        attacks=attacks,
        pgd=PgdConfig(epsilon=float(ns.epsilon)),
        enet=EnetConfig(beta=float(ns.beta), iterations=int(ns.iters), learning_rate=float(ns.enet_lr),
                        search_steps=int(ns.search_steps), kappa=float(ns.kappa)),
        ssim=SsimAttackConfig(thresholds=ConstraintThresholds(float(ns.zeta1), float(ns.zeta2)),
                              iterations=int(ns.iters), step_size=float(ns.step_size),
                              dual_lr=float(ns.dual_lr), search_steps=int(ns.search_steps),
                              kappa=float(ns.kappa)),
        limit=None if ns.limit is None else int(ns.limit),
    )


def cmd_prepare_data(ns):
    paths = D.write_mnist_subset(ns.out, int(ns.train_per_class), int(ns.test_per_class))
    for k, v in paths.items():
        print(f"{k}: {v}")
    return 0


def cmd_train(ns):
    cfg = _validated(train_config, ns)
    p = _paths(ns, ["train_images", "train_labels"])
    tr = D.load_idx(p["train_images"], p["train_labels"], "train")
    model = M.ARCHITECTURES[ns.arch](tr.images.shape[1:], int(tr.labels.max()) + 1, seed=int(ns.seed))

    def progress(epoch, loss):
        log.info("epoch %d/%d loss %.4f", epoch + 1, cfg.epochs, loss)

    M.train(model, tr.images, tr.labels, cfg, progress)
    path = _model_path(ns)
    path.parent.mkdir(parents=True, exist_ok=True)
    M.save_checkpoint(model, path)
    print(f"train accuracy {M.accuracy(model, tr.images, tr.labels):.4f}")
    if ns.test_images or ns.data_dir:
        p = _paths(ns, ["test_images", "test_labels"])
        te = D.load_idx(p["test_images"], p["test_labels"], "test")
        print(f"test accuracy {M.accuracy(model, te.images, te.labels):.4f}")
    print(f"wrote {path}")
    return 0


def cmd_attack(ns):
    cfg = _validated(campaign_config, ns)
    p = _paths(ns, ["test_images", "test_labels"])
    te = D.load_idx(p["test_images"], p["test_labels"], "test")
    model = M.load_checkpoint(_model_path(ns))
    report, outcomes = H.run_campaign(model, te, cfg, seed=int(ns.seed))
    out = Path(ns.out)
    H.emit_report(report, out, outcomes, te.images, int(ns.exhibits))
    H.save_adversarials(out / "adversarial.npz", outcomes)
    print(H.format_table(report))
    for err in report.errors:
        print(f"error: {err}", file=sys.stderr)
    return 1 if report.errors else 0


def cmd_report(ns):
    out = Path(ns.out)
    rows = H.read_outcomes_csv(out / "outcomes.csv")
    report = H.build_report(rows, seed=int(ns.seed))
    outcomes = originals = None
    npz = out / "adversarial.npz"
    if npz.exists() and (ns.test_images or ns.data_dir):
        p = _paths(ns, ["test_images", "test_labels"])
        originals = D.load_idx(p["test_images"], p["test_labels"], "test").images
        adv = H.load_adversarials(npz)
        outcomes = [SimpleNamespace(**r, adversarial=adv[(r["attack"], r["image_id"])])
                    for r in rows if (r["attack"], r["image_id"]) in adv]
    H.emit_report(report, out, None, None)
    if outcomes:
        H.dump_exhibits(out / "images", outcomes, originals, int(ns.exhibits))
    print(H.format_table(report))
    return 0


def cmd_selftest(ns):
    from .selftest import run_all

    results = run_all()
    return 0 if all(r.passed for r in results) else 1


COMMANDS = {
    "prepare-data": cmd_prepare_data,
    "train": cmd_train,
    "attack": cmd_attack,
    "report": cmd_report,
    "selftest": cmd_selftest,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        ns = resolve(args)
        logging.basicConfig(level=ns.log_level.upper(), format="%(asctime)s %(levelname)s %(message)s")
        return COMMANDS[ns.command](ns)
    except UsageError as exc:
        print(f"ssimadv: error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (OSError, ValueError) as exc:
        print(f"ssimadv: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
