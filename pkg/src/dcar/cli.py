"""Command-line entry point: ``dcar <command> [--config PATH] [--seed N] [--out DIR]``.

Exit codes: 0 success, 1 invalid input (config, missing artifacts,
mismatched checkpoints), 2 runtime failure (non-finite loss, failed
gradient check, unexpected errors).
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from dcar import checkpoint
from dcar.backbone import BackboneConfig, Vocab, backbone_from_state, backbone_state
from dcar.category import write_negatives, gen_negatives
from dcar.checkpoint import CheckpointError
from dcar.config import RunConfig, load as load_config
from dcar.dataset import (DatasetError, CaptionRecord, few_shot_split, gen_dataset, gen_taxonomy,
                          read_manifest, write_manifest)
from dcar.retrieval import DEFAULT_KS, I2T, T2I, write_report_csv
from dcar.reweight import batch_token_weights
from dcar.training import (HISTORY_COLUMNS, ConfigError, NegativeSet, PairSet, TrainConfig,
                           adapted_state, evaluate, grad_check, pretrain_backbone,
                           prompts_from_state, train)

log = logging.getLogger("dcar")

MANIFEST = "manifest.jsonl"
VOCAB = "vocab.txt"
NEGATIVES = "negatives.jsonl"
BACKBONE_CKPT = "backbone.ckpt"
ADAPTED_CKPT = "adapted.ckpt"
PRETRAIN_CSV = "pretrain.csv"
METRICS_CSV = "metrics.csv"
REPORT_CSV = "report.csv"
WEIGHTS_CSV = "weights.csv"
ABLATION_CSV = "ablation.csv"
SHOTS_SVG = "shots.svg"

TOGGLE_ARMS = {
    "none": dict(use_dual_prompt=False, use_token_weighting=False, use_category_loss=False),
    "DP": dict(use_dual_prompt=True, use_token_weighting=False, use_category_loss=False),
    "DP+CA": dict(use_dual_prompt=True, use_token_weighting=False, use_category_loss=True),
    "DP+TW": dict(use_dual_prompt=True, use_token_weighting=True, use_category_loss=False),
    "DP+CA+TW": dict(use_dual_prompt=True, use_token_weighting=True, use_category_loss=True),
}
FULL = TOGGLE_ARMS["DP+CA+TW"]
LAMBDA_GRID = ((1.0, 0.0), (0.8, 0.2), (0.5, 0.5), (0.2, 0.8))
ABLATION_COLUMNS = ("group", "arm", "shots", "lambda1", "lambda2", "direction", "mean_r1", "std_r1",
                    "n_seeds", "per_seed")


class InputError(Exception):
    """Bad input or missing prerequisite; maps to exit code 1."""


# -- shared helpers ----------------------------------------------------------

def _provenance(cfg: RunConfig) -> str:
    return f"config_hash={cfg.digest()}"


def _ensure_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise InputError(f"cannot create {path}: {e}") from None
    return path


def _require(path: Path, hint: str) -> Path:
    if not path.is_file():
        raise InputError(f"missing {path}; run `dcar {hint}` first")
    return path


def _write_csv(path: Path, cfg: RunConfig, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    buf = io.StringIO(newline="")
    buf.write(f"# {_provenance(cfg)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def _fmt(x: float) -> str:
    return "nan" if isinstance(x, float) and math.isnan(x) else repr(float(x))


@dataclass
class Data:
    taxonomy: object
    records: list[CaptionRecord]
    vocab: Vocab

    def split(self, name: str) -> list[CaptionRecord]:
        return [r for r in self.records if r.split == name]

    def downstream(self) -> list[CaptionRecord]:
        return [r for r in self.records if r.split != "pretrain_base"]


def _taxonomy(cfg: RunConfig):
    return gen_taxonomy(cfg.n_meta, cfg.n_sub, cfg.taxonomy_seed)


def _load_data(cfg: RunConfig) -> Data:
    d = cfg.data_path
    records = read_manifest(_require(d / MANIFEST, "gen-data"))
    vocab = Vocab.load(_require(d / VOCAB, "gen-data"))
    tax = _taxonomy(cfg)
    known = set(tax.all_subcategories())
    if any(r.subcategory not in known for r in records):
        raise InputError("manifest does not match the configured taxonomy; rerun gen-data")
    return Data(tax, records, vocab)


def _load_backbone(cfg: RunConfig, vocab: Vocab):
    path = _require(cfg.checkpoint_path / BACKBONE_CKPT, "pretrain")
    try:
        bb = backbone_from_state(checkpoint.load(path))
    except (ValueError, RuntimeError) as e:
        raise InputError(f"unusable backbone checkpoint {path}: {e}") from None
    if bb.cfg.vocab_size != len(vocab):
        raise InputError(f"backbone vocab size {bb.cfg.vocab_size} does not match vocab file ({len(vocab)})")
    return bb


def _check_shots(train_recs: list[CaptionRecord], shots: int) -> None:
    counts: dict[str, int] = {}
    for r in train_recs:
        counts[r.subcategory] = counts.get(r.subcategory, 0) + 1
    if not counts or set(counts.values()) != {shots}:
        raise InputError(f"manifest train split is not {shots}-shot; rerun gen-data with this config")


# -- commands ----------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig) -> int:
    out = _ensure_dir(cfg.data_path)
    tax = _taxonomy(cfg)
    pool = gen_dataset(tax, cfg.per_sub, cfg.dataset_seed, n_base_meta=cfg.n_base_meta)
    splits = few_shot_split(pool, cfg.train.shots, cfg.split_seed)
    records = [r for name in ("pretrain_base", "train", "val", "test") for r in splits[name]]
    vocab = Vocab.from_texts(r.caption for r in records)
    write_manifest(out / MANIFEST, records)
    vocab.save(out / VOCAB)
    negs = [n for r in splits["train"] for n in gen_negatives(r, tax, cfg.train.Q, cfg.train.seed)]
    write_negatives(out / NEGATIVES, negs)
    print(f"taxonomy: {len(tax.metas)} meta-categories, {len(tax.all_subcategories())} subcategories")
    print("records: " + ", ".join(f"{k}={len(splits[k])}" for k in ("pretrain_base", "train", "val", "test"))
          + f", total={len(records)}")
    print(f"vocab: {len(vocab)} tokens; negatives: {len(negs)}")
    print(f"wrote {out / MANIFEST}")
    return 0


def cmd_pretrain(cfg: RunConfig) -> int:
    data = _load_data(cfg)
    base = data.split("pretrain_base")
    if not base:
        raise InputError("manifest has no pretrain_base records (n_base_meta = 0?)")
    ck = _ensure_dir(cfg.checkpoint_path)
    out = _ensure_dir(cfg.out_path)
    bcfg = BackboneConfig(vocab_size=len(data.vocab))
    pairs = PairSet.build(base, data.taxonomy, data.vocab, bcfg.max_len)
    t0 = time.perf_counter()
    res = pretrain_backbone(pairs, len(data.vocab), epochs=cfg.pretrain_epochs, seed=cfg.backbone_seed,
                            lr=cfg.pretrain_lr, batch_size=cfg.pretrain_batch_size, tau=cfg.train.tau,
                            bcfg=bcfg)
    checkpoint.save(ck / BACKBONE_CKPT, backbone_state(res.backbone))
    _write_csv(out / PRETRAIN_CSV, cfg, ("epoch", "loss"),
               [(i, _fmt(l)) for i, l in enumerate(res.epoch_losses)])
    last = res.epoch_losses[-1] if res.epoch_losses else float("nan")
    print(f"pretrained {cfg.pretrain_epochs} epochs on {len(pairs)} pairs in "
          f"{time.perf_counter() - t0:.1f}s; final loss {last:.4f}")
    print(f"wrote {ck / BACKBONE_CKPT}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    data = _load_data(cfg)
    backbone = _load_backbone(cfg, data.vocab)
    train_recs, val_recs = data.split("train"), data.split("val")
    _check_shots(train_recs, cfg.train.shots)
    ck = _ensure_dir(cfg.checkpoint_path)
    out = _ensure_dir(cfg.out_path)
    L = backbone.cfg.max_len
    tr = PairSet.build(train_recs, data.taxonomy, data.vocab, L)
    va = PairSet.build(val_recs, data.taxonomy, data.vocab, L)
    negs = NegativeSet.build(tr, data.taxonomy, data.vocab, cfg.train.Q, cfg.train.seed, L)
    res = train(cfg.train, backbone, tr, va, negs)
    checkpoint.save(ck / ADAPTED_CKPT, adapted_state(res, cfg.train))
    _write_csv(out / METRICS_CSV, cfg, HISTORY_COLUMNS,
               [[row["epoch"]] + [_fmt(row[c]) for c in HISTORY_COLUMNS[1:]] for row in res.history])
    print(f"trained {cfg.train.epochs} epochs; L_total {res.initial_loss:.4f} -> {res.final_loss:.4f}")
    print(f"wrote {ck / ADAPTED_CKPT} and {out / METRICS_CSV}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    data = _load_data(cfg)
    backbone = _load_backbone(cfg, data.vocab)
    state = checkpoint.load(_require(cfg.checkpoint_path / ADAPTED_CKPT, "train"))
    prompts = prompts_from_state(state)
    if prompts is not None and (prompts.V.shape[1] != backbone.cfg.d_text
                                or prompts.F_weight.shape[0] != backbone.cfg.d_vision):
        raise InputError("adapted checkpoint dimensions do not match the backbone")
    out = _ensure_dir(cfg.out_path)
    test = PairSet.build(data.split("test"), data.taxonomy, data.vocab, backbone.cfg.max_len)
    reports = evaluate(backbone, prompts, test, DEFAULT_KS)
    write_report_csv(out / REPORT_CSV, [reports[I2T], reports[T2I]], _provenance(cfg))
    for d in (I2T, T2I):
        print(d + " " + "  ".join(f"R@{k}={v:.4f}" for k, v in reports[d].recall.items()))
    print(f"wrote {out / REPORT_CSV}")
    _write_weight_table(out / WEIGHTS_CSV, cfg, backbone, prompts, test, data.vocab)
    print(f"wrote {out / WEIGHTS_CSV}")
    return 0


@torch.no_grad()
def _write_weight_table(path: Path, cfg: RunConfig, backbone, prompts, pairs: PairSet, vocab: Vocab) -> None:
    """Per-word |ΔS| and normalized weights of each test caption against its own image."""
    rows = []
    for start in range(0, len(pairs), 256):
        sl = slice(start, start + 256)
        raw, norm, _, mask = batch_token_weights(backbone, prompts, pairs.ids[sl], pairs.lengths[sl], pairs.images[sl])
        for b, rec in enumerate(pairs.records[sl]):
            for j in range(int(mask[b].sum())):
                rows.append([rec.id, j, vocab.id_to_token(int(pairs.ids[sl][b, j + 1])),
                             _fmt(raw[b, j].item()), _fmt(norm[b, j].item())])
    _write_csv(path, cfg, ("caption_id", "position", "token", "raw", "normalized"), rows)


def cmd_grad_check(cfg: RunConfig) -> int:
    rep = grad_check(cfg.train, epsilon=cfg.grad_check_epsilon)
    for row in rep.table:
        print(f"{row['param']:<16} checked={row['n_checked']:<4} max_rel_err={row['max_rel_err']:.3e}")
    print(f"max_rel_err={rep.max_rel_err:.3e} over {rep.n_coords} coordinates in {rep.seconds:.1f}s")
    if not rep.passed:
        print("gradient check FAILED (threshold 1e-4)", file=sys.stderr)
        return 2
    return 0


# -- ablation ----------------------------------------------------------------

@dataclass(frozen=True)
class Job:
    shots: int
    seed: int
    lambda1: float
    lambda2: float
    use_dual_prompt: bool
    use_token_weighting: bool
    use_category_loss: bool


_WORKER: dict = {}


def _worker_init(cfg: RunConfig) -> None:
    torch.set_num_threads(1)
    data = _load_data(cfg)
    _WORKER.update(cfg=cfg, data=data, backbone=_load_backbone(cfg, data.vocab), pairs={})


def _pairs_for(shots: int) -> tuple[PairSet, PairSet]:
    cache = _WORKER["pairs"]
    if shots not in cache:
        cfg, data = _WORKER["cfg"], _WORKER["data"]
        sp = few_shot_split(data.downstream(), shots, cfg.split_seed)
        L = _WORKER["backbone"].cfg.max_len
        cache[shots] = (PairSet.build(sp["train"], data.taxonomy, data.vocab, L),
                        PairSet.build(sp["test"], data.taxonomy, data.vocab, L))
    return cache[shots]


def _run_job(job: Job) -> tuple[Job, float, float]:
    cfg, data, bb = _WORKER["cfg"], _WORKER["data"], _WORKER["backbone"]
    tr, te = _pairs_for(job.shots)
    if not job.use_dual_prompt:
        prompts = None  # CA/TW alone cannot change retrieval embeddings without prompts
    else:
        tc = cfg.train.replace(shots=job.shots, seed=job.seed, lambda1=job.lambda1, lambda2=job.lambda2,
                               use_dual_prompt=True, use_token_weighting=job.use_token_weighting,
                               use_category_loss=job.use_category_loss)
        negs = NegativeSet.build(tr, data.taxonomy, data.vocab, tc.Q, tc.seed, bb.cfg.max_len)
        prompts = train(tc, bb, tr, None, negs, track_objective=False).prompts
    rep = evaluate(bb, prompts, te, ks=(1,))
    return job, rep[I2T].recall[1], rep[T2I].recall[1]


def ablation_plan(cfg: RunConfig) -> list[tuple[str, str, Job]]:
    """(group, arm, job) rows; identical jobs across groups are run once."""
    t = cfg.train
    rows = []
    for seed in cfg.ablate_seeds:
        for arm, tog in TOGGLE_ARMS.items():
            rows.append(("toggle", arm, Job(t.shots, seed, t.lambda1, t.lambda2, **tog)))
        for l1, l2 in LAMBDA_GRID:
            rows.append(("lambda", f"{l1:g}/{l2:g}", Job(t.shots, seed, l1, l2, **FULL)))
        for s in cfg.ablate_shots:
            rows.append(("shots", f"{s}-shot", Job(s, seed, t.lambda1, t.lambda2, **FULL)))
    return rows


def run_ablation(cfg: RunConfig) -> list[dict]:
    plan = ablation_plan(cfg)
    jobs = sorted(set(j for _, _, j in plan), key=lambda j: (j.shots, j.seed, j.lambda1, j.lambda2,
                                                              j.use_dual_prompt, j.use_token_weighting,
                                                              j.use_category_loss))
    results: dict[Job, tuple[float, float]] = {}
    t0 = time.perf_counter()
    if cfg.ablate_workers > 1:
        import multiprocessing as mp
        with mp.get_context("spawn").Pool(cfg.ablate_workers, _worker_init, (cfg,)) as pool:
            for job, a, b in pool.imap_unordered(_run_job, jobs):
                results[job] = (a, b)
    else:
        _worker_init(cfg)
        for i, job in enumerate(jobs):
            job, a, b = _run_job(job)
            results[job] = (a, b)
            log.info("ablation job %d/%d done (%.0fs)", i + 1, len(jobs), time.perf_counter() - t0)
    grouped: dict[tuple, list[tuple[int, float, float]]] = {}
    keys: dict[tuple, Job] = {}
    for group, arm, job in plan:
        k = (group, arm)
        grouped.setdefault(k, []).append((job.seed, *results[job]))
        keys[k] = job
    out = []
    for (group, arm), vals in sorted(grouped.items()):
        vals.sort()
        job = keys[(group, arm)]
        for di, direction in enumerate((I2T, T2I)):
            xs = np.array([v[1 + di] for v in vals])
            out.append(dict(group=group, arm=arm, shots=job.shots, lambda1=job.lambda1, lambda2=job.lambda2,
                            direction=direction, mean_r1=float(xs.mean()), std_r1=float(xs.std()),
                            n_seeds=len(xs), per_seed=";".join(f"{x:.6f}" for x in xs)))
    log.info("ablation finished: %d unique runs in %.0fs", len(jobs), time.perf_counter() - t0)
    return out


def _ablation_rows_csv(rows: list[dict]) -> list[list]:
    return [[r["group"], r["arm"], r["shots"], f"{r['lambda1']:g}", f"{r['lambda2']:g}", r["direction"],
             f"{r['mean_r1']:.6f}", f"{r['std_r1']:.6f}", r["n_seeds"], r["per_seed"]] for r in rows]


def read_ablation(path: Path) -> list[dict]:
    lines = [l for l in path.read_text(encoding="utf-8").splitlines() if l and not l.startswith("#")]
    rows = []
    for r in csv.DictReader(lines):
        rows.append({**r, "shots": int(r["shots"]), "lambda1": float(r["lambda1"]),
                     "lambda2": float(r["lambda2"]), "mean_r1": float(r["mean_r1"]),
                     "std_r1": float(r["std_r1"]), "n_seeds": int(r["n_seeds"])})
    return rows


def cmd_ablate(cfg: RunConfig) -> int:
    data = _load_data(cfg)
    _load_backbone(cfg, data.vocab)  # fail fast before spawning work
    out = _ensure_dir(cfg.out_path)
    t0 = time.perf_counter()
    rows = run_ablation(cfg)
    _write_csv(out / ABLATION_CSV, cfg, ABLATION_COLUMNS, _ablation_rows_csv(rows))
    _print_table(rows)
    print(f"ablation took {time.perf_counter() - t0:.0f}s; wrote {out / ABLATION_CSV}")
    return 0


def _print_table(rows: list[dict]) -> None:
    print(f"{'group':<8} {'arm':<10} {'dir':<4} {'R@1 mean':>9} {'std':>7}")
    for r in rows:
        print(f"{r['group']:<8} {r['arm']:<10} {r['direction']:<4} {r['mean_r1']:>9.4f} {r['std_r1']:>7.4f}")


def write_shots_svg(path: Path, rows: list[dict], provenance: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "dcar"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for direction in (I2T, T2I):
        pts = sorted((r["shots"], r["mean_r1"], r["std_r1"]) for r in rows
                     if r["group"] == "shots" and r["direction"] == direction)
        if pts:
            x, y, s = map(np.array, zip(*pts))
            ax.errorbar(x, y, yerr=s, marker="o", capsize=3, label=direction)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("shots per subcategory")
    ax.set_ylabel("test R@1")
    ax.set_title("Recall@1 vs shots", fontsize=10)
    ax.legend()
    fig.text(0.01, 0.01, provenance, fontsize=6, color="grey")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_report(cfg: RunConfig) -> int:
    path = _require(cfg.out_path / ABLATION_CSV, "ablate")
    rows = read_ablation(path)
    _print_table(rows)
    svg = cfg.out_path / SHOTS_SVG
    write_shots_svg(svg, rows, _provenance(cfg))
    print(f"wrote {svg}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcar", description="Dual-prompt image-text retrieval toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="key = value config file")
        p.add_argument("--seed", type=int, default=None, help="override the training seed")
        p.add_argument("--out", type=Path, default=None,
                       help="artifact root: data/, checkpoints/ and outputs go under DIR")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a single config key (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides: dict[str, str] = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides.update(data_dir=str(args.out / "data"), checkpoint_dir=str(args.out / "checkpoints"),
                         out_dir=str(args.out))
    return load_config(args.config, overrides)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.out is not None and not args.out.is_dir():
            raise InputError(f"--out directory does not exist: {args.out}")
        return COMMANDS[args.command](cfg)
    except (ConfigError, InputError, DatasetError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - surfaced as a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
