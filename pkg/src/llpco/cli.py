"""Experiment command line: generate data, train a scenario, evaluate, report.

Configs are strict JSON (unknown keys are rejected) and are written next to
every artifact so a run can be reproduced from its output directory alone.
Exit codes: 0 success, 2 config validation, 3 numeric failure, 4 I/O.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import ConfigError, FormatError, NumericalError

SCENARIOS = ("SI", "SII", "SIII", "SIV", "SwAV-baseline")

# Scenario wiring: prior mode, whether the variance mask applies, and which
# polygon region training samples come from.
SCENARIO_PRIOR_MODE = {
    "SI": "global_annotated",
    "SII": "global_census",
    "SIII": "exact_per_bag",
    "SIV": "global_annotated",
    "SwAV-baseline": "equipartition",
}
SCENARIO_VARIANCE_MASK = {
    "SI": False,
    "SII": True,
    "SIII": False,
    "SIV": False,
    "SwAV-baseline": False,
}
SCENARIO_TRAIN_REGION = {
    "SI": "all",
    "SII": "all",
    "SIII": "train",
    "SIV": "all",
    "SwAV-baseline": "all",
}

_TOP_KEYS = {"data", "scenario", "model", "train", "eval", "io"}
_DATA_KEYS_COMMON = {"kind", "classes", "proportions", "seed"}
_DATA_KEYS_BLOBS = _DATA_KEYS_COMMON | {"dim", "separation", "sigma", "n_train", "n_test"}
_DATA_KEYS_RASTER = _DATA_KEYS_COMMON | {
    "height",
    "width",
    "fields",
    "signature_gap",
    "texture_sigma",
    "field_jitter",
    "channels",
    "test_fraction",
    "patch_size",
}
_SCENARIO_KEYS = {"name", "prior", "census", "mask_percentile"}
_CENSUS_KEYS = {"raw", "targets"}
_MODEL_KEYS = {"hidden_dims", "embed_dim", "temperature"}
_TRAIN_KEYS = {
    "epochs",
    "bag_size",
    "samples_per_epoch",
    "lr_init",
    "lr_final",
    "warmup_epochs",
    "weight_decay",
    "epsilon",
    "sinkhorn_iters",
    "tau",
    "freeze_prototypes_epochs",
    "hard_codes",
    "seed",
    "augment",
}
_AUGMENT_KEYS = {"rotate90", "mirror", "resized_crop", "crop_scale", "noise_sigma", "dropout_rate"}
_EVAL_KEYS = {"knn_k", "assigner", "kmeans_seeds"}
_IO_KEYS = {"out", "dataset", "test_data", "checkpoint"}


def _reject_unknown(block: dict, allowed: set, where: str) -> None:
    if not isinstance(block, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = set(block) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def validate_config(config: dict) -> dict:
    """Structural validation of an experiment config (strict keys)."""
    _reject_unknown(config, _TOP_KEYS, "config")
    if "data" in config:
        kind = config["data"].get("kind")
        if kind == "blobs":
            _reject_unknown(config["data"], _DATA_KEYS_BLOBS, "data")
        elif kind == "raster":
            _reject_unknown(config["data"], _DATA_KEYS_RASTER, "data")
        else:
            raise ConfigError(f"data.kind must be 'blobs' or 'raster', got {kind!r}")
    if "scenario" in config:
        _reject_unknown(config["scenario"], _SCENARIO_KEYS, "scenario")
        name = config["scenario"].get("name")
        if name not in SCENARIOS:
            raise ConfigError(f"scenario.name must be one of {SCENARIOS}, got {name!r}")
        if "census" in config["scenario"]:
            _reject_unknown(config["scenario"]["census"], _CENSUS_KEYS, "scenario.census")
    if "model" in config:
        _reject_unknown(config["model"], _MODEL_KEYS, "model")
    if "train" in config:
        _reject_unknown(config["train"], _TRAIN_KEYS, "train")
        if "augment" in config["train"]:
            _reject_unknown(config["train"]["augment"], _AUGMENT_KEYS, "train.augment")
    if "eval" in config:
        _reject_unknown(config["eval"], _EVAL_KEYS, "eval")
        assigner = config["eval"].get("assigner", "prototypes")
        if assigner not in ("prototypes", "kmeans"):
            raise ConfigError(f"eval.assigner must be 'prototypes' or 'kmeans', got {assigner!r}")
    if "io" in config:
        _reject_unknown(config["io"], _IO_KEYS, "io")
    return config


def load_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return validate_config(raw)


def _require(config: dict, *path_parts: str):
    node = config
    for part in path_parts:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"config is missing {'.'.join(path_parts)}")
        node = node[part]
    return node


def _out_dir(config: dict, override) -> Path:
    out = override or config.get("io", {}).get("out")
    if not out:
        raise ConfigError("no output directory (io.out or --out)")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_config_sidecar(out: Path, config: dict) -> None:
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _apply_seed_override(config: dict, seed) -> dict:
    if seed is None:
        return config
    config = json.loads(json.dumps(config))
    config.setdefault("data", {})
    config.setdefault("train", {})
    config["data"]["seed"] = seed
    config["train"]["seed"] = seed
    return config


def _native_proportions(labels, class_count):
    import numpy as np

    counts = np.bincount(np.asarray(labels), minlength=class_count)
    return counts / counts.sum()


def cmd_generate(config: dict, out_override=None) -> int:
    import numpy as np

    from .datagen import gen_blobs, gen_patch_world, save_dataset, split_vector_dataset

    data = _require(config, "data")
    out = _out_dir(config, out_override)
    kind = data["kind"]
    proportions = _require(config, "data", "proportions")
    seed = int(data.get("seed", 0))
    if kind == "blobs":
        n_train = int(data.get("n_train", 2000))
        n_test = int(data.get("n_test", 0))
        # one draw for both splits so they share the class layout
        full = gen_blobs(
            class_count=int(_require(config, "data", "classes")),
            dim=int(data.get("dim", 16)),
            proportions=proportions,
            centers_separation=float(data.get("separation", 8.0)),
            sigma=float(data.get("sigma", 1.0)),
            n=n_train + n_test,
            seed=seed,
        )
        realized = _native_proportions(full.labels, full.class_count)
        if n_test > 0:
            train, test = split_vector_dataset(full, n_train)
            save_dataset(out / "train.llpd", train)
            save_dataset(out / "test.llpd", test)
            paths = [out / "train.llpd", out / "test.llpd"]
        else:
            save_dataset(out / "train.llpd", full)
            paths = [out / "train.llpd"]
    else:
        raster = gen_patch_world(
            height=int(_require(config, "data", "height")),
            width=int(_require(config, "data", "width")),
            class_count=int(_require(config, "data", "classes")),
            field_count=int(data.get("fields", 12)),
            proportions=proportions,
            signature_gap=float(data.get("signature_gap", 4.0)),
            texture_sigma=float(data.get("texture_sigma", 0.5)),
            seed=seed,
            channels=int(data.get("channels", 3)),
            patch_size=int(data.get("patch_size", 21)),
            test_fraction=float(data.get("test_fraction", 0.5)),
            field_jitter=float(data.get("field_jitter", 0.0)),
        )
        save_dataset(out / "world.llpd", raster)
        paths = [out / "world.llpd"]
        realized = _native_proportions(raster.labels.ravel(), raster.class_count)
    _write_config_sidecar(out, config)
    print("wrote " + ", ".join(str(p) for p in paths))
    print("realized proportions: [" + ", ".join(f"{p:.4f}" for p in np.asarray(realized)) + "]")
    return 0


def _resolve_training_data(config: dict):
    """Load the dataset named in io.dataset and apply the scenario's
    region/mask rules. Returns (sampling_dataset, class_count, input_dim,
    holdout_info) where holdout_info carries what eval needs later."""
    import numpy as np

    from .bagging import census_prior
    from .datagen import PatchRaster, VectorDataset, load_dataset, patch_dataset, variance_mask

    scenario = _require(config, "scenario", "name")
    dataset_path = _require(config, "io", "dataset")
    ds = load_dataset(dataset_path)

    if isinstance(ds, VectorDataset):
        sampling = ds
    elif isinstance(ds, PatchRaster):
        keep = None
        if SCENARIO_VARIANCE_MASK[scenario]:
            percentile = float(config["scenario"].get("mask_percentile", 25.0))
            keep, removed = variance_mask(ds.values, percentile)
            print(f"variance mask removed {removed:.1%} of pixels")
        sampling = patch_dataset(ds, region=SCENARIO_TRAIN_REGION[scenario], keep_mask=keep)
        if len(sampling) == 0:
            raise ConfigError("no usable patch centers after region/mask filtering")
    else:
        raise ConfigError(f"unsupported dataset type {type(ds).__name__}")

    # Prior vector per the scenario table.
    mode = SCENARIO_PRIOR_MODE[scenario]
    if mode == "exact_per_bag":
        if getattr(sampling, "labels", None) is None:
            raise ConfigError("scenario SIII needs per-sample labels")
        global_w = None
    elif mode == "equipartition":
        global_w = None
    elif mode == "global_annotated":
        global_w = _native_proportions(sampling.labels, sampling.class_count)
    else:  # global_census
        block = config["scenario"]
        if "prior" in block and "census" in block:
            raise ConfigError("scenario SII takes either a prior vector or census data, not both")
        if "prior" in block:
            global_w = np.asarray(block["prior"], dtype=float)
        elif "census" in block:
            raw = [(str(name), float(pct)) for name, pct in block["census"]["raw"]]
            global_w = census_prior(raw, [str(t) for t in block["census"]["targets"]])
        else:
            raise ConfigError("scenario SII needs scenario.prior or scenario.census")
        if global_w.size != sampling.class_count:
            raise ConfigError(
                f"prior has length {global_w.size}, dataset has {sampling.class_count} classes"
            )
    return sampling, mode, global_w


def cmd_train(config: dict, out_override=None) -> int:
    from .bagging import PriorMode, PriorSetup
    from .datagen import AugmentationPolicy
    from .model import ModelConfig, init_model
    from .trainer import TrainConfig, align_prototypes_to_prior, save_checkpoint, train

    out = _out_dir(config, out_override)
    sampling, mode, global_w = _resolve_training_data(config)

    model_block = config.get("model", {})
    model_config = ModelConfig(
        input_dim=sampling.input_dim,
        hidden_dims=tuple(model_block.get("hidden_dims", (64,))),
        embed_dim=int(model_block.get("embed_dim", 32)),
        cluster_count=sampling.class_count,
        temperature=float(model_block.get("temperature", 0.1)),
    )
    train_block = dict(_require(config, "train"))
    augment_block = train_block.pop("augment", {})
    if "crop_scale" in augment_block:
        augment_block["crop_scale"] = tuple(augment_block["crop_scale"])
    policy = AugmentationPolicy(**augment_block)
    try:
        train_config = TrainConfig(tau=model_config.temperature, **train_block)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad train block: {exc}") from exc

    state = init_model(model_config, seed=train_config.seed)
    prior = PriorSetup(mode=PriorMode(mode), global_w=global_w)
    final_state, trace = train(state, sampling, prior, train_config, policy=policy)

    # Canonicalize cluster naming against the proportion vector, so cluster k
    # answers for class k wherever the prior can tell clusters apart.
    perm = None
    if global_w is not None:
        final_state, perm = align_prototypes_to_prior(final_state, sampling, global_w)
    elif mode == "exact_per_bag" and trace.epochs:
        final_state, perm = align_prototypes_to_prior(
            final_state, sampling, trace.epochs[-1].mean_bag_prior
        )

    save_checkpoint(out / "checkpoint.llpc", final_state, train_config, trace)
    _write_trace_csv(out / "trace.csv", trace, prior, sampling.class_count)
    _write_config_sidecar(out, config)
    last = trace.epochs[-1] if trace.epochs else None
    if last is not None:
        # report under the saved model's (aligned) cluster naming
        final_w = last.predicted_w if perm is None else last.predicted_w[perm]
        pred = ", ".join(f"{p:.4f}" for p in final_w)
        print(f"trained {len(trace.epochs)} epochs; final loss {last.loss:.4f};"
              f" predicted proportions [{pred}]")
        if trace.collapse_detected:
            print("warning: code entropy at the feasible maximum; run flagged as collapsed")
    print(f"wrote {out / 'checkpoint.llpc'} and {out / 'trace.csv'}")
    return 0


def _write_trace_csv(path, trace, prior, class_count: int) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = (
            ["epoch", "loss", "lr"]
            + [f"predicted_w_{k}" for k in range(class_count)]
            + [f"prior_w_{k}" for k in range(class_count)]
        )
        writer.writerow(header)
        for e in trace.epochs:
            if prior.global_w is not None:
                prior_cols = [repr(float(x)) for x in prior.global_w]
            elif prior.mode.value == "equipartition":
                prior_cols = [repr(1.0 / class_count)] * class_count
            else:
                prior_cols = [""] * class_count  # per-bag priors, no global vector
            writer.writerow(
                [e.epoch, repr(e.loss), repr(e.lr)]
                + [repr(float(x)) for x in e.predicted_w]
                + prior_cols
            )


def _encode_all(state, features):
    import numpy as np

    from .model import encode

    zs = []
    for start in range(0, features.shape[0], 2048):
        Z, _ = encode(state, features[start : start + 2048])
        zs.append(Z)
    return np.concatenate(zs, axis=0)


def cmd_eval(config: dict, out_override=None, checkpoint_override=None) -> int:
    from .datagen import PatchRaster, VectorDataset, load_dataset, patch_dataset
    from .metrics import MetricsReport, accuracies, ari, kmeans, knn_classify, nmi, predict_map
    from .model import prototype_scores
    from .trainer import load_checkpoint

    out = _out_dir(config, out_override)
    ckpt_path = checkpoint_override or config.get("io", {}).get("checkpoint")
    if not ckpt_path:
        raise ConfigError("no checkpoint (io.checkpoint or --checkpoint)")
    state, _, _ = load_checkpoint(ckpt_path)

    ds = load_dataset(_require(config, "io", "dataset"))
    raster = None
    if isinstance(ds, VectorDataset):
        test_path = config.get("io", {}).get("test_data")
        if not test_path:
            raise ConfigError("vector datasets need io.test_data for evaluation")
        test = load_dataset(test_path)
        train_features, train_labels = ds.features, ds.labels
        test_features, test_labels = test.features, test.labels
        class_count = ds.class_count
    else:
        raster = ds
        train_split = patch_dataset(raster, region="train")
        test_split = patch_dataset(raster, region="test")
        if len(test_split) == 0:
            raise ConfigError("raster has no held-out patch centers to evaluate")
        train_features = train_split.matrix(range(len(train_split)))
        train_labels = train_split.labels
        test_features = test_split.matrix(range(len(test_split)))
        test_labels = test_split.labels
        class_count = raster.class_count
    if train_features.shape[1] != state.config.input_dim:
        raise ConfigError(
            f"checkpoint expects input_dim {state.config.input_dim}, dataset provides"
            f" {train_features.shape[1]}"
        )

    train_Z = _encode_all(state, train_features)
    test_Z = _encode_all(state, test_features)

    eval_block = config.get("eval", {})
    assigner = eval_block.get("assigner", "prototypes")
    kmeans_detail = None
    if assigner == "kmeans":
        seeds = tuple(eval_block.get("kmeans_seeds", (0, 1, 2, 3, 4)))
        km = kmeans(test_Z, class_count, seeds=seeds)
        assignments = km.assignments
        kmeans_detail = []
        for seed, (assign, inertia) in zip(seeds, km.per_seed):
            _, seed_acc_h, _ = accuracies(test_labels, assign, class_count)
            kmeans_detail.append({"seed": int(seed), "inertia": inertia, "acc_h": seed_acc_h})
    else:
        assignments = prototype_scores(state, test_Z).argmax(axis=0)

    acc_p, acc_h, perm = accuracies(test_labels, assignments, class_count)
    k = int(eval_block.get("knn_k", 25))
    knn_pred = knn_classify(train_Z, train_labels, test_Z, k=k)
    report = MetricsReport(
        acc_p=acc_p,
        acc_h=acc_h,
        nmi=nmi(test_labels, assignments),
        ari=ari(test_labels, assignments),
        knn_acc=float((knn_pred == test_labels).mean()),
        permutation=perm,
        confusion=_confusion(test_labels, assignments, class_count),
    )

    payload = {
        "config": config,
        "scenario": config.get("scenario", {}).get("name"),
        "bag_size": config.get("train", {}).get("bag_size"),
        "metrics": report.to_dict(),
    }
    if kmeans_detail is not None:
        payload["kmeans_per_seed"] = kmeans_detail
    with open(out / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    _write_confusion_csv(out / "confusion.csv", report.confusion)
    if raster is not None:
        grid = predict_map(state, raster, permutation=perm)
        _write_pgm(out / "map.pgm", grid)
        _write_palette(out / "map_palette.txt", class_count)

    for name, value in (
        ("acc_p", report.acc_p),
        ("acc_h", report.acc_h),
        ("nmi", report.nmi),
        ("ari", report.ari),
        (f"knn({k})", report.knn_acc),
    ):
        print(f"{name:10s} {value:.4f}")
    print(f"{'swap':10s} {'yes' if report.acc_p < report.acc_h else 'no'}")
    print(f"wrote {out / 'metrics.json'}")
    return 0


def _confusion(test_labels, assignments, class_count):
    from .metrics import confusion_matrix

    return confusion_matrix(test_labels, assignments, class_count)


def _write_confusion_csv(path, confusion) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["true\\pred"] + [str(j) for j in range(confusion.shape[1])])
        for i, row in enumerate(confusion):
            writer.writerow([str(i)] + [str(int(v)) for v in row])


def _write_pgm(path, grid) -> None:
    """8-bit binary PGM; class IDs are the pixel values, borders (-1) are 255."""
    import numpy as np

    H, W = grid.shape
    data = np.where(grid < 0, 255, grid).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _write_palette(path, class_count: int, names=None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k in range(class_count):
            name = names[k] if names else f"class_{k}"
            fh.write(f"{k} {name}\n")
        fh.write("255 border\n")


def cmd_report(files: list[str], out_override=None) -> int:
    rows = []
    for f in files:
        try:
            with open(f, "r", encoding="utf-8") as fh:
                payload = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"cannot read metrics file {f}: {exc}") from exc
        m = payload.get("metrics", {})
        rows.append(
            {
                "name": Path(f).resolve().parent.name,
                "scenario": payload.get("scenario") or "-",
                "bag_size": payload.get("bag_size") or "-",
                "acc_p": m.get("acc_p", float("nan")),
                "acc_h": m.get("acc_h", float("nan")),
                "nmi": m.get("nmi", float("nan")),
                "ari": m.get("ari", float("nan")),
                "knn": m.get("knn_acc", float("nan")),
            }
        )
    rows.sort(key=lambda r: -r["acc_h"])

    header = f"{'name':20s} {'scenario':14s} {'bag':>5s} {'acc_p':>7s} {'acc_h':>7s} {'nmi':>6s} {'ari':>6s} {'knn':>6s} swap"
    print(header)
    print("-" * len(header))
    for r in rows:
        swap = "yes" if r["acc_p"] < r["acc_h"] else "no"
        print(
            f"{r['name'][:20]:20s} {str(r['scenario']):14s} {str(r['bag_size']):>5s}"
            f" {r['acc_p']:7.4f} {r['acc_h']:7.4f} {r['nmi']:6.3f} {r['ari']:6.3f}"
            f" {r['knn']:6.3f} {swap}"
        )

    if out_override:
        import csv

        out = Path(out_override)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["name", "scenario", "bag_size", "acc_p", "acc_h", "nmi", "ari", "knn", "swap"])
            for r in rows:
                writer.writerow(
                    [r["name"], r["scenario"], r["bag_size"], r["acc_p"], r["acc_h"],
                     r["nmi"], r["ari"], r["knn"], r["acc_p"] < r["acc_h"]]
                )
        print(f"wrote {out / 'report.csv'}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="llpco",
        description="Proportion-constrained contrastive clustering experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("generate", "train", "eval"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, default=None, help="override data/train seeds")
        p.add_argument("--out", default=None, help="output directory (overrides io.out)")
        if name == "eval":
            p.add_argument("--checkpoint", default=None, help="checkpoint path (overrides io.checkpoint)")
    p = sub.add_parser("report")
    p.add_argument("files", nargs="+", help="metrics.json files to compare")
    p.add_argument("--out", default=None, help="directory for report.csv")
    return parser


def _cap_threads() -> None:
    cap = os.environ.get("LLP_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def main(argv=None) -> int:
    _cap_threads()  # must run before numpy is first imported
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.files, out_override=args.out)
        config = _apply_seed_override(load_config(args.config), args.seed)
        if args.command == "generate":
            return cmd_generate(config, out_override=args.out)
        if args.command == "train":
            return cmd_train(config, out_override=args.out)
        if args.command == "eval":
            return cmd_eval(config, out_override=args.out, checkpoint_override=args.checkpoint)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
