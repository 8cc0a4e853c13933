"""``bitflip`` command line: train, attack, evaluate, compare with the oracle, run campaigns."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from .attacks import SsaProblem, run_ssa, run_tsa
from .bitrep import BitRangeError
from .config import ConfigError, RunConfig, config_from_dict, load_config, load_datasets
from .datagen import DatasetError, save_csv_dataset
from .evalharness import (
    CampaignSpec,
    OracleSizeError,
    compare_with_oracle,
    emit_report,
    evaluate_attack,
    linear_instance,
    run_campaign,
    ssa_subset_instance,
    write_trace_csv,
)
from .lpbox import NumericError
from .modelfile import ModelFormatError, load_model, save_model
from .netcore import Network, TrainingError, TriggerSpec, accuracy, apply_trigger, predict, train_model

log = logging.getLogger("bitflip")

EXIT_OK = 0
EXIT_ATTACK_FAILED = 2
EXIT_INVALID = 3
EXIT_NUMERIC = 4

OUT_DIR_ENV = "BITFLIP_OUT_DIR"


class UsageError(ValueError):
    pass


def _out_path(args, cfg: RunConfig, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    base = os.environ.get(OUT_DIR_ENV) or cfg.out_dir or "."
    return Path(base) / default_name


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n")


def _require_model(args) -> Network:
    if not args.model:
        raise UsageError("--model is required for this command")
    return load_model(args.model)


def _pick_ssa_sample(net: Network, cfg: RunConfig, val) -> tuple[int, np.ndarray, int]:
    """Validation sample for SSA: explicit index, else the first correctly classified one of ``source``."""
    sec = cfg.ssa
    if sec.sample_index is not None:
        if not 0 <= sec.sample_index < len(val):
            raise ConfigError(f"ssa.sample_index: {sec.sample_index} outside [0, {len(val)})")
        i = sec.sample_index
    else:
        src = 0 if sec.source is None else sec.source
        if not 0 <= src < net.n_classes:
            raise ConfigError(f"ssa.source: class {src} out of range")
        pred = predict(net, val.X)
        hits = np.flatnonzero((val.y == src) & (pred == src))
        if hits.size == 0:
            raise ConfigError(f"ssa.source: no correctly classified validation sample of class {src}")
        i = int(hits[0])
    if not 0 <= sec.target < net.n_classes:
        raise ConfigError(f"ssa.target: class {sec.target} out of range")
    if int(val.y[i]) == sec.target:
        raise ConfigError("ssa.target: equals the sample's true class")
    return i, val.X[i], int(val.y[i])


# ---------------------------------------------------------------- commands


def cmd_train(args, cfg: RunConfig) -> int:
    train, _, val = load_datasets(cfg)
    t = cfg.train
    net = train_model(train, t.hidden_widths, t.epochs, t.lr, t.seed, t.Q, t.batch_size, t.momentum)
    path = _out_path(args, cfg, "model.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_model(net, path)
    print(json.dumps({"model": str(path), "acc": accuracy(net, val)}))
    return EXIT_OK


def cmd_attack(args, cfg: RunConfig) -> int:
    net = _require_model(args)
    _, aux, val = load_datasets(cfg)
    mode = args.mode
    if mode == "ssa":
        i, x, s = _pick_ssa_sample(net, cfg, val)
        rep = run_ssa(
            net,
            x,
            s,
            cfg.ssa.target,
            aux,
            cfg.search_policy("ssa"),
            cfg.admm_config("ssa"),
            cfg.ssa.delta,
            val,
            cfg.ssa.delta_escalation,
        )
        doc = rep.to_dict()
        doc["sample_index"] = i
    else:
        if not 0 <= cfg.tsa.target < net.n_classes:
            raise ConfigError(f"tsa.target: class {cfg.tsa.target} out of range")
        mask = cfg.trigger_mask(net.input_dim)
        lo, hi = val.input_range if np.all(np.isfinite(val.input_range)) else (0.0, 1.0)
        trig = cfg.tsa.trigger
        rep = run_tsa(
            net,
            cfg.tsa.target,
            mask,
            aux,
            cfg.search_policy("tsa"),
            cfg.admm_config("tsa"),
            cfg.tsa.seed,
            val,
            (lo, hi),
            {"patch": trig.patch, "corner": trig.corner},
        )
        doc = rep.to_dict()
    path = _out_path(args, cfg, f"{mode}_report.json")
    _write_json(path, doc)
    write_trace_csv(rep.trace, path.with_suffix(".trace.csv"))
    print(json.dumps({"report": str(path), "success": rep.success, "n_flip": rep.n_flip, "asr": rep.asr}))
    return EXIT_OK if rep.success else EXIT_ATTACK_FAILED


def _parse_flips(doc, net: Network) -> list[tuple[int, int, int]]:
    items = doc["flipped_bits"] if isinstance(doc, dict) else doc
    if not isinstance(items, list):
        raise UsageError("flip list must be a JSON list or a report with 'flipped_bits'")
    K, C = net.output.shape
    seen = set()
    out = []
    for n, fb in enumerate(items):
        try:
            key = (int(fb["row"]), int(fb["col"]), int(fb["bit"]))
        except (KeyError, TypeError, ValueError):
            raise UsageError(f"flipped_bits[{n}]: expected {{row, col, bit}}") from None
        r, c, b = key
        if not (0 <= r < K and 0 <= c < C and 0 <= b < net.Q):
            raise UsageError(f"flipped_bits[{n}]: {key} outside the {K}x{C}x{net.Q} layout")
        if key in seen:
            raise UsageError(f"flipped_bits[{n}]: duplicate {key}")
        seen.add(key)
        out.append(key)
    return out


def cmd_eval(args, cfg: RunConfig) -> int:
    net = _require_model(args)
    if not args.flips:
        raise UsageError("--flips is required for eval")
    try:
        doc = json.loads(Path(args.flips).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{args.flips}: invalid JSON ({exc.msg})") from None
    flips = _parse_flips(doc, net)
    bits = net.output.bits.copy()
    for r, c, b in flips:
        bits[r, c, b] ^= 1
    flipped = net.with_output_bits(bits)
    _, _, val = load_datasets(cfg)
    report = doc if isinstance(doc, dict) else {}
    kind = report.get("attack_type", "ssa")
    if kind == "tsa":
        target = int(report.get("target_class", cfg.tsa.target))
        trig = TriggerSpec(cfg.trigger_mask(net.input_dim), np.asarray(report["trigger"]["pattern"]))
        held = val.X[val.y != target]
        attacked = apply_trigger(held if held.shape[0] else val.X, trig)
    else:
        if "sample_index" in report:
            cfg = replace(cfg, ssa=replace(cfg.ssa, sample_index=int(report["sample_index"])))
        if "target_class" in report:
            cfg = replace(cfg, ssa=replace(cfg.ssa, target=int(report["target_class"])))
        _, x, _ = _pick_ssa_sample(net, cfg, val)
        target = cfg.ssa.target
        attacked = x[None, :]
    m = evaluate_attack(net, flipped, val, attacked, target)
    out = {"acc": m.acc, "pa_acc": m.pa_acc, "asr": m.asr, "n_flip": m.n_flip}
    _write_json(_out_path(args, cfg, "eval.json"), out)
    print(json.dumps(out))
    return EXIT_OK


def cmd_oracle(args, cfg: RunConfig) -> int:
    sec = cfg.oracle
    admm = replace(cfg.admm_config("ssa"), k=sec.k)
    if sec.instance == "linear":
        inst = linear_instance(sec.V, sec.seed)
        admm = replace(admm, lambda1=1.0, lambda2=0.0)
    else:
        net = _require_model(args)
        _, aux, val = load_datasets(cfg)
        hits = np.flatnonzero(val.y == sec.source)
        if hits.size == 0:
            raise ConfigError(f"oracle.source: no validation sample of class {sec.source}")
        prob = SsaProblem(net, val.X[hits[0]], sec.source, sec.target, aux, cfg.ssa.delta)
        inst = ssa_subset_instance(prob, sec.V, admm.lambda2)
        admm = replace(admm, lambda1=1.0)
    res = compare_with_oracle(inst, admm)
    _write_json(_out_path(args, cfg, "oracle.json"), res)
    print(json.dumps({k: res[k] for k in ("oracle_value", "admm_value", "gap", "admm_feasible")}))
    return EXIT_OK


def ssa_work_items(net: Network, val, targets, per_target: int, seed: int) -> list:
    """``per_target`` random validation samples of other classes for every target, in target order."""
    rng = np.random.default_rng(seed)
    work = []
    for t in targets:
        pool = np.flatnonzero(val.y != t)
        if pool.size == 0:
            raise ConfigError(f"campaign.targets: no validation samples outside class {t}")
        for i in rng.choice(pool, size=per_target, replace=pool.size < per_target):
            work.append((val.X[i], int(val.y[i]), int(t)))
    return work


def cmd_campaign(args, cfg: RunConfig) -> int:
    net = _require_model(args)
    _, aux, val = load_datasets(cfg)
    sec = cfg.campaign
    targets = list(range(net.n_classes)) if sec.targets is None else [int(t) for t in sec.targets]
    for t in targets:
        if not 0 <= t < net.n_classes:
            raise ConfigError(f"campaign.targets: class {t} out of range")
    mode = sec.attack_type
    if mode == "ssa":
        work = ssa_work_items(net, val, targets, sec.per_target, sec.seed)
        mask = None
    else:
        work = targets
        mask = cfg.trigger_mask(net.input_dim)
    spec = CampaignSpec(
        attack_type=mode,
        network=net,
        work=work,
        aux=aux,
        validation=val,
        cfg=cfg.admm_config(mode),
        policy=cfg.search_policy(mode),
        delta=cfg.ssa.delta,
        mask=mask,
        mask_spec={"patch": cfg.tsa.trigger.patch, "corner": cfg.tsa.trigger.corner} if mask is not None else None,
        jobs=args.jobs,
        seed=sec.seed,
    )
    summary = run_campaign(spec)
    path = _out_path(args, cfg, f"campaign_{mode}.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    emit_report(summary, path, path.with_suffix(".csv"))
    print(json.dumps({k: v for k, v in summary.to_dict().items() if k != "attacks"}))
    return EXIT_OK


def cmd_gen_data(args, cfg: RunConfig) -> int:
    if cfg.data.kind == "csv":
        raise ConfigError("data.kind: gen-data needs a synthetic kind (blobs or patches)")
    parts = load_datasets(cfg)
    out = Path(args.out) if args.out else Path(os.environ.get(OUT_DIR_ENV) or cfg.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    for d in parts:
        save_csv_dataset(d, out / f"{d.role}.csv")
    print(json.dumps({"dir": str(out), "sizes": {d.role: len(d) for d in parts}}))
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--model", help="model file")
    common.add_argument("--out", help="output file (directory for gen-data)")
    common.add_argument("--seed", type=int, help="override training/trigger/campaign/oracle seeds")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for campaigns")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="bitflip", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train and quantize a model").set_defaults(fn=cmd_train)
    a = sub.add_parser("attack", parents=[common], help="run one SSA or TSA attack")
    a.add_argument("mode", choices=["ssa", "tsa"])
    a.set_defaults(fn=cmd_attack)
    e = sub.add_parser("eval", parents=[common], help="replay a flip list")
    e.add_argument("--flips", help="JSON flip list or attack report")
    e.set_defaults(fn=cmd_eval)
    sub.add_parser("oracle", parents=[common], help="ADMM vs exhaustive search").set_defaults(fn=cmd_oracle)
    sub.add_parser("campaign", parents=[common], help="batch of attacks").set_defaults(fn=cmd_campaign)
    sub.add_parser("gen-data", parents=[common], help="write synthetic CSV splits").set_defaults(fn=cmd_gen_data)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.jobs < 1:
            raise UsageError("--jobs must be at least 1")
        cfg = load_config(args.config) if args.config else config_from_dict({})
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        return args.fn(args, cfg)
    except (NumericError, TrainingError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (
        ConfigError,
        ModelFormatError,
        DatasetError,
        UsageError,
        OracleSizeError,
        BitRangeError,
        FileNotFoundError,
        ValueError,
    ) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
