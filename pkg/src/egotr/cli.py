"""Command-line entry point: ``egotr {generate,train,eval,diagnose}``."""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from .config import RunConfig, load_config
from .data import CrossViewDataset, load_dataset, make_dataset, polar_transform, save_dataset, split_counts
from .evaluation import (build_index, cross_layer_similarity, neighbour_contrast, pos_embed_gram,
                         recall_at_k, write_matrix_csv, write_report_csv)
from .exceptions import CheckpointError, EgoTRError, UsageError
from .model import BRANCHES, EgoTrModel, ModelConfig, descriptors, load_checkpoint, save_checkpoint
from .training import AdamW, append_metrics_csv, fit

UNTRAINED_FLAG = "embeddings untrained/absent"


# ---------------------------------------------------------------------------
# Output directories
# ---------------------------------------------------------------------------


def make_out_dir(out: str | None, command: str, seed: int) -> str:
    """Create a fresh run directory; an existing non-empty one is never reused."""
    if out is None:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        out = os.path.join("runs", f"{command}-{stamp}-s{seed}")
        base, k = out, 1
        while os.path.exists(out):
            k += 1
            out = f"{base}-{k}"
    if os.path.isdir(out) and os.listdir(out):
        raise UsageError(f"output directory {out} exists and is not empty; runs never overwrite")
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc.strerror}") from None
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory {out} is not writable")
    return out


def _echo_config(out: str, config: RunConfig) -> None:
    with open(os.path.join(out, "config.txt"), "w") as fh:
        fh.write(config.to_text())


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def branch_inputs(model_config: ModelConfig, dataset: CrossViewDataset) -> tuple[np.ndarray, np.ndarray]:
    """Ground and aerial arrays in the format the model's branches expect."""
    check_dataset_matches(model_config, dataset)
    aerial = dataset.aerial
    if model_config.use_polar:
        aerial = polar_transform(aerial, model_config.ground_size)
    return dataset.ground, aerial


def check_dataset_matches(model_config: ModelConfig, dataset: CrossViewDataset) -> None:
    gs = tuple(dataset.ground.shape[-2:])
    asz = tuple(dataset.aerial.shape[-2:])
    if gs != model_config.ground_size or asz != model_config.aerial_size:
        raise CheckpointError(
            f"model expects ground {model_config.ground_size} / aerial {model_config.aerial_size} "
            f"but the dataset has ground {gs} / aerial {asz}")


def _data_tag(params: dict) -> str:
    gs = params.get("ground_size", ("?", "?"))
    return (f"pairs={params.get('pairs')};seed={params.get('seed')};"
            f"aligned={str(params.get('aligned')).lower()};sizes={gs[0]}x{gs[1]},{params.get('aerial_size')}")


def _r1(model: EgoTrModel, ground, aerial, ids, batch_size) -> float:
    index = build_index(model, aerial, ids, batch_size)
    return recall_at_k(descriptors(model, ground, "ground", batch_size), index, ids).r1


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(config: RunConfig, out: str) -> CrossViewDataset:
    dataset = make_dataset(config.pairs, seed=config.seed, ground_size=config.ground_size,
                           aerial_size=config.aerial_size, orientation_aligned=config.aligned)
    save_dataset(dataset, out)
    _echo_config(out, config)
    n_train, n_val, n_test = split_counts(config.pairs)
    print(f"{out}: {config.pairs} pairs (train {n_train} / val {n_val} / test {n_test}), "
          f"ground {config.ground_size[0]}x{config.ground_size[1]}, aerial {config.aerial_size}, "
          f"aligned={str(config.aligned).lower()}")
    return dataset


def cmd_train(config: RunConfig, data: str, out: str, resume: str | None = None) -> dict:
    """Train on the ``train`` split; select ``best.ckpt`` by validation r@1.

    Writes ``init.ckpt`` (before any update), ``epoch-NNN.ckpt`` (parameters
    only), ``last.ckpt`` (with optimizer state, resumable), ``best.ckpt`` and
    ``metrics.csv``.
    """
    dataset = load_dataset(data)
    # image sizes always follow the dataset
    config = config.replace(ground_size=dataset.params["ground_size"],
                            aerial_size=dataset.params["aerial_size"])
    model_config = config.model_config()
    train_cfg = config.train_config()
    ground, aerial = branch_inputs(model_config, dataset)
    rows = {pid: k for k, pid in enumerate(dataset.ids)}
    train = dataset.subset("train")
    tr_rows = [rows[i] for i in train.ids]
    va_ids = dataset.manifest("val").ids
    va_rows = [rows[i] for i in va_ids]
    start_epoch, optimizer, best = 0, None, None
    if resume is not None:
        model, header, extra = load_checkpoint(resume, expect=model_config)
        if "epoch" not in header or "optim.t" not in header:
            raise CheckpointError(f"{resume} has no optimizer state; resume from a last.ckpt")
        start_epoch = int(header["epoch"])
        optimizer = AdamW(model.named_parameters(), lr=train_cfg.lr,
                          weight_decay=train_cfg.weight_decay, betas=train_cfg.betas, eps=train_cfg.eps)
        optimizer.load_blobs(extra, int(header["optim.t"]))
        if header.get("best.r@1"):
            best = float(header["best.r@1"])
    else:
        model = EgoTrModel.init(model_config, config.seed)
    _echo_config(out, config)
    base_header = {"seed": config.seed, "data": _data_tag(dataset.params)}
    if start_epoch == 0:
        save_checkpoint(os.path.join(out, "init.ckpt"), model, {**base_header, "epoch": 0})
    state = {"best": best}

    def on_epoch_end(m, metrics, opt, _improved):
        header = {**base_header, "epoch": metrics.epoch}
        if metrics.recall_at_1 is not None:
            header["val.r@1"] = f"{metrics.recall_at_1:.6f}"
        append_metrics_csv(os.path.join(out, "metrics.csv"), metrics)
        save_checkpoint(os.path.join(out, f"epoch-{metrics.epoch:03d}.ckpt"), m, header)
        if state["best"] is None or metrics.recall_at_1 > state["best"]:
            state["best"] = metrics.recall_at_1
            save_checkpoint(os.path.join(out, "best.ckpt"), m, header)
        last = {**header, "optim.t": opt.state.t, "best.r@1": f"{state['best']:.6f}"}
        save_checkpoint(os.path.join(out, "last.ckpt"), m, last, opt.state_blobs())
        print(f"epoch {metrics.epoch}: loss {metrics.mean_loss:.4f} lr {metrics.lr:.2e} "
              f"grad {metrics.grad_norm:.3f} val r@1 {metrics.recall_at_1:.3f}", flush=True)

    result = fit(model, train, train_cfg, aerial_train=aerial[tr_rows],
                 evaluate=lambda m: _r1(m, ground[va_rows], aerial[va_rows], va_ids,
                                        config.eval_batch_size),
                 on_epoch_end=on_epoch_end, optimizer=optimizer, start_epoch=start_epoch)
    return {"model": model, "result": result, "out": out}


def cmd_eval(config: RunConfig, checkpoint: str, data: str, out: str, split: str = "test",
             index_split: str | None = None):
    """Full-split retrieval report; the index defaults to the query split's aerial images.

    The checkpoint may come from a differently generated dataset (cross-dataset
    evaluation) as long as image sizes agree.
    """
    model, header, _ = load_checkpoint(checkpoint)
    dataset = load_dataset(data)
    ground, aerial = branch_inputs(model.config, dataset)
    rows = {pid: k for k, pid in enumerate(dataset.ids)}
    q_ids = dataset.manifest(split).ids
    i_ids = dataset.manifest(index_split or split).ids
    index = build_index(model, aerial[[rows[i] for i in i_ids]], i_ids, config.eval_batch_size)
    queries = descriptors(model, ground[[rows[i] for i in q_ids]], "ground", config.eval_batch_size)
    report = recall_at_k(queries, index, q_ids)
    evaluated_on = _data_tag(dataset.params)
    trained_on = header.get("data", "")
    extra = {"split": split, "index_split": index_split or split, "trained_on": trained_on,
             "evaluated_on": evaluated_on,
             "cross_dataset": str(bool(trained_on) and trained_on != evaluated_on).lower()}
    _echo_config(out, config)
    write_report_csv(os.path.join(out, "report.csv"), report, extra)
    print(f"{split}: r@1 {report.r1:.4f} r@5 {report.r5:.4f} r@10 {report.r10:.4f} "
          f"r@1% {report.r1p:.4f} (M={report.m})")
    return report


def cmd_diagnose(config: RunConfig, checkpoint: str, data: str, out: str, split: str = "test",
                 max_images: int = 64) -> dict:
    """Cross-layer class-token similarity and positional-embedding Gram matrices."""
    model, header, _ = load_checkpoint(checkpoint)
    dataset = load_dataset(data)
    ground, aerial = branch_inputs(model.config, dataset)
    rows = {pid: k for k, pid in enumerate(dataset.ids)}
    sel = [rows[i] for i in dataset.manifest(split).ids][:max_images]
    sims = {}
    for branch, images in (("ground", ground[sel]), ("aerial", aerial[sel])):
        _, states = descriptors(model, images, branch, config.eval_batch_size, return_layers=True)
        sims[branch] = cross_layer_similarity(states)
    table = [[layer + 1, sims["ground"][layer], sims["aerial"][layer]]
             for layer in range(model.config.depth)]
    write_matrix_csv(os.path.join(out, "cross_layer_similarity.csv"), table,
                     header=["layer", "ground", "aerial"],
                     comments=[f"mode = {model.config.mode}", f"images = {len(sel)}"])
    untrained = not model.config.use_pos_embed or header.get("epoch", "") == "0"
    status = UNTRAINED_FLAG if untrained else "trained"
    contrast_rows = []
    for branch in BRANCHES:
        grid = model.config.grid(branch)
        gram = pos_embed_gram(model.branch(branch).x_pos)
        write_matrix_csv(os.path.join(out, f"pos_gram_{branch}.csv"), gram,
                         comments=[f"status = {status}", f"grid = {grid[0]}x{grid[1]}"])
        c = neighbour_contrast(gram, grid)
        contrast_rows.append([branch, c.adjacent_mean, c.other_mean, c.pooled_se, c.gap_in_se, status])
    write_matrix_csv(os.path.join(out, "pos_contrast.csv"), contrast_rows,
                     header=["branch", "adjacent_mean", "other_mean", "pooled_se", "gap_in_se", "status"])
    _echo_config(out, config)
    mean_sim = {b: float(np.mean(s[:-1])) if len(s) > 1 else 1.0 for b, s in sims.items()}
    print(f"cross-layer similarity (mean over layers 1..L-1): ground {mean_sim['ground']:.4f} "
          f"aerial {mean_sim['aerial']:.4f}; positional embeddings: {status}")
    return {"similarity": sims, "mean_similarity": mean_sim, "status": status}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _sizes(text: str) -> tuple[tuple[int, int], int]:
    """``HxW,S`` -> ((H, W), S)."""
    try:
        ground, aerial = text.split(",")
        h, w = (int(v) for v in ground.lower().split("x"))
        return (h, w), int(aerial)
    except ValueError:
        raise argparse.ArgumentTypeError(f"sizes must look like 32x128,64, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="key = value config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS,
                        help="output directory (default runs/<command>-<timestamp>-s<seed>)")
    parser = argparse.ArgumentParser(prog="egotr", parents=[common],
                                     description="Cross-view geo-localization toy pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", parents=[common], help="render a synthetic dataset")
    gen.add_argument("--pairs", type=int)
    gen.add_argument("--aligned", dest="aligned", action="store_true", default=None)
    gen.add_argument("--unaligned", dest="aligned", action="store_false")
    gen.add_argument("--sizes", type=_sizes, help="ground HxW and aerial side, e.g. 32x128,64")

    train = sub.add_parser("train", parents=[common], help="train a model")
    train.add_argument("--data", required=True, help="dataset directory")
    train.add_argument("--mode", choices=("self", "self_cross"))
    train.add_argument("--no-pos-embed", dest="use_pos_embed", action="store_false", default=None)
    train.add_argument("--polar", dest="use_polar", action="store_true", default=None)
    train.add_argument("--epochs", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--batch-size", dest="batch_size", type=int)
    train.add_argument("--resume", help="last.ckpt of an earlier run")

    ev = sub.add_parser("eval", parents=[common], help="retrieval report for a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", default="test")
    ev.add_argument("--index-split", help="split whose aerial images form the index")

    diag = sub.add_parser("diagnose", parents=[common], help="similarity and positional CSVs")
    diag.add_argument("--checkpoint", required=True)
    diag.add_argument("--data", required=True)
    diag.add_argument("--split", default="test")
    diag.add_argument("--max-images", type=int, default=64)
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    keys = ("seed", "pairs", "aligned", "mode", "use_pos_embed", "use_polar", "epochs", "lr",
            "batch_size")
    out = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    if getattr(args, "sizes", None) is not None:
        out["ground_size"], out["aerial_size"] = args.sizes
    return out


def run(argv=None):
    """Parse ``argv`` and execute; returns the command's result."""
    args = build_parser().parse_args(argv)
    config = load_config(getattr(args, "config", None), _overrides(args))
    out = make_out_dir(getattr(args, "out", None), args.command, config.seed)
    if args.command == "generate":
        return cmd_generate(config, out)
    if args.command == "train":
        return cmd_train(config, args.data, out, args.resume)
    if args.command == "eval":
        return cmd_eval(config, args.checkpoint, args.data, out, args.split, args.index_split)
    return cmd_diagnose(config, args.checkpoint, args.data, out, args.split, args.max_images)


def main(argv=None) -> int:
    try:
        run(argv)
    except EgoTRError as exc:
        print(f"egotr: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
