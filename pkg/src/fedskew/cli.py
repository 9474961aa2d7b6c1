"""JSON-configured experiment runner.

    fedskew train|sweep-emd|verify-bound|share --config cfg.json [--out DIR] [--seed N]

Every random component draws its seed from ``hash64(global_seed, name)`` so a
config fully determines the bytes written. Each CSV gets a ``<name>.meta.json``
sidecar holding the resolved config and the derived seeds.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import sys
from pathlib import Path

import numpy as np

from .analysis import BOUND_VARIANTS, ProbeSpec, divergence_vs_emd_sweep, verify_bound
from .data import LabeledDataset, PartitionSpec, gen_synthetic, load_idx, partition, split_balanced
from .errors import ConfigError, FedskewError, FormatError
from .federation import FedConfig, run_centralized, run_fedavg
from .model import init_params
from .sharing import ShareConfig, run_sharing_experiment

CONFIG_VERSION = 1

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3

GRID_NOTE = "EMD 1.764 is omitted: it depends on one specific partition construction"

REQUIRED = object()

# allowed keys and their defaults
SCHEMA: dict[str, dict] = {
    "dataset.synthetic": {
        "kind": REQUIRED, "num_classes": REQUIRED, "dim": REQUIRED, "per_class": REQUIRED,
        "separation": 3.0, "train": REQUIRED, "test": REQUIRED, "holdout": 0,
    },
    "dataset.idx": {
        "kind": REQUIRED, "train_images": REQUIRED, "train_labels": REQUIRED, "test_images": REQUIRED,
        "test_labels": REQUIRED, "holdout": 0, "train_limit": None, "test_limit": None,
    },
    "model": {"hidden": [64], "init_scale": 1.0},
    "partition": {"kind": "iid", "K": 10, "classes_per_client": 1, "emd": 0.0},
    "fed": {"B": REQUIRED, "E": 1, "eta0": 0.01, "decay": 1.0, "rounds": 1},
    "share": {"beta": REQUIRED, "alpha": REQUIRED, "warmup_steps": 0, "warmup_eta": None, "warmup_batch": None},
    "sweep": {"grid": REQUIRED, "reps": 5},
    "bound": {
        "T": 2, "m_rounds": 3, "eta": 0.1, "pairs": 64, "safety_factor": 1.5,
        "radius": None, "lambda_override": None, "variant": "full",
    },
}
TOP_LEVEL = {"version", "global_seed", "output_dir", "dataset", "model", "partition", "fed", "share", "sweep", "bound"}
SEED_COMPONENTS = ("dataset", "partition", "init", "fed", "share", "sweep", "probe")


def hash64(global_seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{global_seed}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def derive_seeds(global_seed: int) -> dict[str, int]:
    return {name: hash64(global_seed, name) for name in SEED_COMPONENTS}


def _fill(section: str, given, schema_key: str | None = None) -> dict:
    schema = SCHEMA[schema_key or section]
    if not isinstance(given, dict):
        raise ConfigError(f"section {section!r} must be an object", section)
    unknown = sorted(set(given) - set(schema))
    if unknown:
        raise ConfigError(f"unknown field {section}.{unknown[0]}", f"{section}.{unknown[0]}")
    out = {}
    for key, default in schema.items():
        if key in given:
            out[key] = given[key]
        elif default is REQUIRED:
            raise ConfigError(f"missing field {section}.{key}", f"{section}.{key}")
        else:
            out[key] = copy.deepcopy(default)
    return out


def resolve_config(raw: dict, needs: tuple[str, ...], seed: int | None = None, out: str | None = None) -> dict:
    """Validate ``raw`` against the schema and fill defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - TOP_LEVEL)
    if unknown:
        raise ConfigError(f"unknown field {unknown[0]}", unknown[0])
    if raw.get("version") != CONFIG_VERSION:
        raise ConfigError(f"config version must be {CONFIG_VERSION}", "version")
    cfg = {"version": CONFIG_VERSION}
    gs = raw.get("global_seed", 0) if seed is None else seed
    if not isinstance(gs, int) or isinstance(gs, bool) or not 0 <= gs < 2**64:
        raise ConfigError("global_seed must be an unsigned 64-bit integer", "global_seed")
    cfg["global_seed"] = gs
    cfg["output_dir"] = out if out is not None else raw.get("output_dir", "out")

    if "dataset" not in raw:
        raise ConfigError("missing section dataset", "dataset")
    ds = raw["dataset"]
    kind = ds.get("kind") if isinstance(ds, dict) else None
    if kind not in ("synthetic", "idx"):
        raise ConfigError("dataset.kind must be 'synthetic' or 'idx'", "dataset.kind")
    cfg["dataset"] = _fill("dataset", ds, f"dataset.{kind}")
    cfg["model"] = _fill("model", raw.get("model", {}))
    cfg["partition"] = _fill("partition", raw.get("partition", {}))
    for section in ("fed", "share", "sweep", "bound"):
        if section in raw or section in needs:
            if section not in raw:
                raise ConfigError(f"missing section {section}", section)
            cfg[section] = _fill(section, raw[section])
    cfg["seeds"] = derive_seeds(gs)
    return cfg


# ------------------------------------------------------------------ wiring


def load_data(cfg: dict) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset | None]:
    """(train, test, holdout). The holdout is None when it has zero rows."""
    ds = cfg["dataset"]
    H = int(ds["holdout"])
    if ds["kind"] == "synthetic":
        C, total = ds["num_classes"], ds["train"] + ds["test"] + H
        if ds["per_class"] * C < total:
            raise ConfigError(
                f"num_classes*per_class={ds['per_class'] * C} is below train+test+holdout={total}",
                "dataset.per_class",
            )
        sizes = [ds["train"], ds["test"], H]
        if any(s % C for s in sizes):
            raise ConfigError("train, test and holdout sizes must be multiples of num_classes", "dataset.train")
        full = gen_synthetic(C, ds["dim"], ds["per_class"], ds["separation"], cfg["seeds"]["dataset"])
        train, test, hold = split_balanced(full, sizes)
        return train, test, hold if H else None
    pool = load_idx(ds["train_images"], ds["train_labels"])
    test = load_idx(ds["test_images"], ds["test_labels"])
    if H >= len(pool):
        raise ConfigError("holdout leaves no training data", "dataset.holdout")
    hold = pool.subset(np.arange(len(pool) - H, len(pool))) if H else None
    train = pool.subset(np.arange(len(pool) - H))
    if ds["train_limit"] is not None:
        train = train.subset(np.arange(min(ds["train_limit"], len(train))))
    if ds["test_limit"] is not None:
        test = test.subset(np.arange(min(ds["test_limit"], len(test))))
    return train, test, hold


def make_init(cfg: dict, data: LabeledDataset):
    m = cfg["model"]
    dims = [data.dim, *m["hidden"], data.num_classes]
    return init_params(dims, cfg["seeds"]["init"], m["init_scale"])


def make_partition(cfg: dict) -> PartitionSpec:
    p = cfg["partition"]
    return PartitionSpec(p["kind"], p["K"], cfg["seeds"]["partition"], p["classes_per_client"], p["emd"])


def make_fed(cfg: dict) -> FedConfig:
    f = cfg["fed"]
    return FedConfig(
        K=cfg["partition"]["K"], B=f["B"], E=f["E"], eta0=f["eta0"], decay=f["decay"],
        rounds=f["rounds"], seed=cfg["seeds"]["fed"],
    )


def checked_shards(cfg: dict, train: LabeledDataset, fed: FedConfig | None):
    shards = partition(train, make_partition(cfg))
    if fed is not None:
        smallest = min(s.n for s in shards)
        if fed.B > smallest:
            raise ConfigError(f"fed.B={fed.B} exceeds the smallest client shard ({smallest} examples)", "fed.B")
    return shards


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_outputs(cfg: dict, files: dict[str, str], extra_meta: dict | None = None) -> None:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        with open(out / name, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        if name.endswith(".csv"):
            meta = {"file": name, "config": cfg, **(extra_meta or {})}
            with open(out / f"{name}.meta.json", "w", encoding="utf-8", newline="") as fh:
                fh.write(_dump(meta))


# ---------------------------------------------------------------- commands


def cmd_train(cfg: dict) -> int:
    train, test, _ = load_data(cfg)
    fed = make_fed(cfg)
    shards = checked_shards(cfg, train, fed)
    init = make_init(cfg, train)
    fedavg = run_fedavg(shards, test, init, fed)
    central = run_centralized(train, test, init, fed)
    rows = [[a.round, repr(a.eta), repr(a.test_accuracy), repr(b.test_accuracy)] for a, b in zip(fedavg, central)]
    summary = {
        "final_acc_fedavg": fedavg[-1].test_accuracy,
        "final_acc_sgd": central[-1].test_accuracy,
        "accuracy_gap": abs(fedavg[-1].test_accuracy - central[-1].test_accuracy),
        "client_T": fedavg[-1].client_steps,
    }
    write_outputs(cfg, {
        "rounds.csv": _csv(["round", "eta", "acc_fedavg", "acc_sgd"], rows),
        "summary.json": _dump(summary),
    })
    return EXIT_OK


def cmd_sweep_emd(cfg: dict) -> int:
    train, test, _ = load_data(cfg)
    fed = make_fed(cfg)
    grid = cfg["sweep"]["grid"]
    if not isinstance(grid, list) or not grid:
        raise ConfigError("sweep.grid must be a non-empty list", "sweep.grid")
    if fed.B > len(train) // fed.K:
        raise ConfigError(f"fed.B={fed.B} exceeds the client shard size {len(train) // fed.K}", "fed.B")
    table = divergence_vs_emd_sweep(
        train, [float(e) for e in grid], cfg["sweep"]["reps"], fed, make_init(cfg, train),
        test=test, seed=cfg["seeds"]["sweep"],
    )
    write_outputs(
        cfg,
        {"divergence.csv": table.divergence_csv(), "accuracy_vs_emd.csv": table.accuracy_csv()},
        {"note": GRID_NOTE},
    )
    return EXIT_OK


def cmd_verify_bound(cfg: dict) -> int:
    train, _, _ = load_data(cfg)
    b = cfg["bound"]
    if b["variant"] not in BOUND_VARIANTS:
        raise ConfigError(f"bound.variant must be one of {BOUND_VARIANTS}", "bound.variant")
    shards = checked_shards(cfg, train, None)
    probe = ProbeSpec(pairs=b["pairs"], radius=b["radius"], seed=cfg["seeds"]["probe"],
                      safety_factor=b["safety_factor"])
    report = verify_bound(
        shards, make_init(cfg, train), b["eta"], b["T"], b["m_rounds"], probe,
        lambda_override=b["lambda_override"], variant=b["variant"],
    )
    write_outputs(cfg, {"bound.csv": report.to_csv()}, {
        "passed": report.passed,
        "lambdas": [float(x) for x in report.lambdas],
        "lambda_source": report.lambda_source,
        "reestimated": report.reestimated,
    })
    return EXIT_OK if report.passed else EXIT_FAILED


def cmd_share(cfg: dict) -> int:
    train, test, hold = load_data(cfg)
    if hold is None:
        raise ConfigError("sharing needs dataset.holdout > 0", "dataset.holdout")
    fed = make_fed(cfg)
    shards = checked_shards(cfg, train, fed)
    init = make_init(cfg, train)
    s = cfg["share"]
    alphas = s["alpha"] if isinstance(s["alpha"], list) else [s["alpha"]]
    if not alphas:
        raise ConfigError("share.alpha must not be empty", "share.alpha")
    traj, emds, control = [], [], None
    for i, alpha in enumerate(alphas):
        share_cfg = ShareConfig(
            beta=s["beta"], alpha=alpha, warmup_steps=s["warmup_steps"], seed=cfg["seeds"]["share"],
            warmup_eta=s["warmup_eta"], warmup_batch=s["warmup_batch"],
        )
        # the control arm does not depend on alpha, so it is trained once
        rep = run_sharing_experiment(shards, hold, test, init, fed, share_cfg, control=control)
        control = rep.control
        traj.append(rep.trajectory_csv(with_alpha=True, header=i == 0))
        emds.append(rep.emd_csv(with_alpha=True, header=i == 0))
    write_outputs(cfg, {"sharing.csv": "".join(traj), "emd_shift.csv": "".join(emds)})
    return EXIT_OK


COMMANDS = {
    "train": (cmd_train, ("fed",)),
    "sweep-emd": (cmd_sweep_emd, ("fed", "sweep")),
    "verify-bound": (cmd_verify_bound, ("bound",)),
    "share": (cmd_share, ("fed", "share")),
}


def _report(err: dict) -> None:
    sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fedskew", description="Federated learning under label skew")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="path to a JSON experiment config")
    parser.add_argument("--out", default=None, help="output directory (overrides output_dir)")
    parser.add_argument("--seed", type=int, default=None, help="global seed (overrides global_seed)")
    args = parser.parse_args(argv)

    fn, needs = COMMANDS[args.command]
    try:
        with open(args.config, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as e:
        _report({"error": "IOError", "message": str(e)})
        return EXIT_IO
    except json.JSONDecodeError as e:
        _report({"error": "ConfigError", "message": f"invalid JSON: {e}"})
        return EXIT_CONFIG
    try:
        cfg = resolve_config(raw, needs, seed=args.seed, out=args.out)
        return fn(cfg)
    except FormatError as e:
        _report(e.to_dict())
        return EXIT_IO
    except FedskewError as e:
        _report(e.to_dict())
        return EXIT_CONFIG
    except OSError as e:
        _report({"error": "IOError", "message": str(e)})
        return EXIT_IO
    except (TypeError, ValueError) as e:
        # wrongly typed config values surface here
        _report({"error": "ConfigError", "message": str(e)})
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
