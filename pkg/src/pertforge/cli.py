"""Command-line driver: gen-data, train, attack, report.

Every command takes --config (key=value file) plus repeatable --set
overrides, and echoes the resolved configuration into its output directory
so any run can be reproduced from the echo alone.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import attacks, metrics, models, synthdata
from .config import RunConfig
from .errors import CapabilityError, ConfigError, NumericsError
from .synthdata import DatasetSpec

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICS = 4


def _budget(cfg, max_iters):
    return attacks.PerturbationBudget(epsilon=cfg.get_float("epsilon"),
                                      alpha=cfg.get_float("alpha"),
                                      max_iters=max_iters)


def cmd_gen_data(cfg):
    out = cfg.get("out")
    cfg.echo(out)
    spec_seed = cfg.get_int("seed")
    for style in cfg.styles():
        spec = DatasetSpec(seed=spec_seed, n_train=cfg.get_int("n_train"),
                           n_test=cfg.get_int("n_test"), style=style)
        split = synthdata.generate(spec)
        synthdata.save_dataset(split.train, os.path.join(out, f"style_{style}", "train"))
        synthdata.save_dataset(split.test, os.path.join(out, f"style_{style}", "test"))
        print(f"style {style}: {spec.n_train} train / {spec.n_test} test samples")
    return 0


def cmd_train(cfg):
    out = cfg.get("out")
    cfg.echo(out)
    data_dir = cfg.get("data")
    if not data_dir:
        raise ConfigError("train requires data=<dataset directory>")
    train_set = synthdata.load_dataset(os.path.join(data_dir, "train"))
    test_set = synthdata.load_dataset(os.path.join(data_dir, "test"))
    model = models.build_model(cfg.get("arch"), seed=cfg.get_int("seed"),
                               k=cfg.get_int("k"))
    log = models.train(model, train_set,
                       epochs=cfg.get_int("epochs"), lr=cfg.get_float("lr"),
                       momentum=cfg.get_float("momentum"),
                       batch_size=cfg.get_int("batch_size"),
                       seed=cfg.get_int("seed"), val=test_set,
                       target_iou=0.40 if cfg.get("arch") == "y_shaped_net" else None)
    ckpt = os.path.join(out, "checkpoint")
    models.save_checkpoint(model, ckpt)
    with open(os.path.join(out, "training_log.json"), "w") as fh:
        json.dump({"epoch_losses": log.epoch_losses,
                   "val_accuracy": log.val_accuracy, "val_iou": log.val_iou,
                   "converged": log.converged, "notes": log.notes},
                  fh, indent=2)
    print(f"checkpoint written to {ckpt}; "
          f"held-out accuracy {log.val_accuracy:.3f}"
          + (f", IoU {log.val_iou:.3f}" if log.val_iou is not None else ""))
    return 0


def _load_victim(cfg):
    ckpt = cfg.get("checkpoint")
    if not ckpt:
        raise ConfigError("attack requires checkpoint=<dir>")
    return models.load_checkpoint(ckpt), ckpt


def cmd_attack(cfg):
    out = cfg.get("out")
    cfg.echo(out)
    kind = cfg.get("attack")
    model, ckpt = _load_victim(cfg)
    data_dir = cfg.get("data")
    if not data_dir:
        raise ConfigError("attack requires data=<dataset directory>")
    test_set = synthdata.load_dataset(os.path.join(data_dir, "test"))
    seed = cfg.get_int("seed")
    ckpt_hash = models.checkpoint_hash(ckpt)
    bank_dir = os.path.join(out, "perturbations")
    os.makedirs(bank_dir, exist_ok=True)

    limit = cfg.get("limit")
    if limit:
        n = min(int(limit), len(test_set.images))
        test_set = synthdata.Dataset(test_set.images[:n], test_set.labels[:n],
                                     test_set.masks[:n], test_set.style,
                                     test_set.ids[:n])

    adv_masks = None
    if kind == "iap":
        budget = _budget(cfg, cfg.get_int("iap_iters"))
        l_adv = 1.0 - test_set.labels.astype(np.float32)
        bank = attacks.run_chunked(
            lambda imgs, l: attacks.iap_classification_batch(model, imgs, l, budget),
            test_set.images, l_adv)
        source = bank
    elif kind == "iap-seg":
        if not getattr(model, "has_segmentation", False):
            raise CapabilityError(f"{model.arch} has no segmentation branch")
        fake = test_set.labels == 0
        test_set = synthdata.Dataset(test_set.images[fake], test_set.labels[fake],
                                     test_set.masks[fake], test_set.style,
                                     [i for i, f in zip(test_set.ids, fake) if f])
        budget = _budget(cfg, cfg.get_int("seg_iters"))
        adv_masks = np.stack([synthdata.triangle_mask(seed + i)
                              for i in range(len(test_set.images))])
        bank = attacks.run_chunked(
            lambda imgs, m: attacks.iap_segmentation_batch(
                model, imgs, m, budget,
                lam=cfg.get_float("lambda"), l_adv=cfg.get_float("l_adv")),
            test_set.images, adv_masks)
        source = bank
    elif kind == "uap":
        print("note: UAP crafting is data-free; the dataset is used only "
              "for evaluation")
        budget = _budget(cfg, cfg.get_int("uap_iters"))
        pair = attacks.craft_uap_pair(model, budget, kappa=cfg.get_float("kappa"),
                                      iters=cfg.get_int("uap_iters"), seed=seed)
        bank = list(pair.values())
        source = pair
    elif kind == "urn":
        budget = _budget(cfg, 1)
        pert = attacks.urn_baseline(budget, seed)
        bank = [pert]
        source = pert
    else:
        raise ConfigError(f"unknown attack kind {kind!r}")

    for i, pert in enumerate(bank):
        pert.meta.setdefault("model_checkpoint_hash", ckpt_hash)
        attacks.save_perturbation(os.path.join(bank_dir, f"pert_{i:05d}"), pert)

    report = metrics.evaluate_attack(model, test_set, source,
                                     model_id=model.arch,
                                     dataset_id=test_set.style,
                                     adv_masks=adv_masks)
    metrics.write_report_csv(os.path.join(out, "report.csv"), [report])
    metrics.write_report_json(os.path.join(out, "report.json"), [report],
                              metadata={"checkpoint": ckpt,
                                        "checkpoint_hash": ckpt_hash,
                                        "attack": kind, "seed": seed})
    print(f"{kind}: clean accuracy {report.clean_accuracy:.3f} -> "
          f"adversarial {report.adv_accuracy:.3f}")
    return 0


def cmd_report(cfg):
    out = cfg.get("out")
    cfg.echo(out)
    sources = cfg.get("sources")
    if not sources:
        raise ConfigError("report requires sources=<name:checkpoint:data;...>")
    targets = {}
    uap_bank = {}
    budget = attacks.PerturbationBudget(epsilon=cfg.get_float("epsilon"),
                                        alpha=cfg.get_float("alpha"),
                                        max_iters=cfg.get_int("uap_iters"))
    for entry in sources.split(";"):
        parts = entry.strip().split(":")
        if len(parts) != 3:
            raise ConfigError(f"bad source entry {entry!r}; "
                              "expected name:checkpoint:data")
        name, ckpt, data_dir = parts
        model = models.load_checkpoint(ckpt)
        dataset = synthdata.load_dataset(os.path.join(data_dir, "test"))
        targets[name] = (model, dataset)
        bank_dir = cfg.get(f"bank_{name}")
        if bank_dir:
            uap_bank[name] = {z: attacks.load_perturbation(
                os.path.join(bank_dir, "perturbations", f"pert_{z:05d}"))
                for z in (0, 1)}
        else:
            uap_bank[name] = attacks.craft_uap_pair(
                model, budget, kappa=cfg.get_float("kappa"),
                iters=cfg.get_int("uap_iters"), seed=cfg.get_int("seed"))
    urn = attacks.urn_baseline(budget, cfg.get_int("seed"))
    matrix = metrics.transfer_matrix(targets, uap_bank, urn=urn)
    metrics.write_matrix_csv(os.path.join(out, "transfer_matrix.csv"), matrix)
    with open(os.path.join(out, "transfer_matrix.json"), "w") as fh:
        json.dump(matrix.to_dict(), fh, indent=2)
        fh.write("\n")
    print(f"transfer matrix over {list(targets)} written to {out}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "attack": cmd_attack,
    "report": cmd_report,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pertforge",
        description="Craft and evaluate adversarial perturbations against "
                    "toy forgery-forensics models.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", help="key=value configuration file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config entry")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config, args.overrides)
        return COMMANDS[args.command](cfg)
    except (ConfigError, CapabilityError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FileNotFoundError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericsError as exc:
        print(f"numerics error: {exc}", file=sys.stderr)
        return EXIT_NUMERICS


if __name__ == "__main__":
    sys.exit(main())
