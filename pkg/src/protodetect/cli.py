"""Command-line entry point.

One binary, nine subcommands covering the full pipeline: prototype fitting,
detection, evaluation, compliance classification, attack search, exclusion
verification, encoder training, solver self-checks and synthetic data
generation. Every output file gets a .manifest.json sidecar with flags, seed
and input digests; the sidecar is the only file carrying a timestamp, so
outputs are byte-identical across reruns and thread counts. Runtime failures
print a single line "error:<Class>: <message>" and exit 1; argparse handles
unknown flags with exit 2.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .attack import search_dual_flip
from .classifier import DEFAULT_HEADS, DetectionOutcome, HeadSelection, detect, fit_prototypes
from .core import EmbeddingDataset, LabeledEmbedding
from .dataio import infer_format, read_dataset, read_prototypes, write_dataset, write_prototypes
from .errors import FormatError, InvalidInput
from .evaluation import MetricReport, aggregate, score_sample
from .fixtures import generate_separable_instance
from .manifest import manifest_for, write_manifest
from .metrics import L0Params
from .theorem import classify_compliance
from .training import TrainConfig, train, write_encoder

__all__ = ["main"]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _map_ordered(fn, items, threads: int):
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _emit(args, output_path, inputs) -> None:
    flags = {k: v for k, v in vars(args).items() if k not in ("func", "subcommand")}
    man = manifest_for(args.subcommand, flags, getattr(args, "seed", None), inputs)
    write_manifest(man, output_path)


def _clean_rows(ds: EmbeddingDataset):
    if any(ds.attacked_flags()):
        raise InvalidInput("this subcommand expects a clean dataset (all attacked=0)")
    return list(ds)


def cmd_fit_prototypes(args) -> int:
    ds = read_dataset(args.input, infer_format(args.input))
    protos = fit_prototypes(ds)
    write_prototypes(protos, args.output, infer_format(args.output))
    _emit(args, args.output, [args.input])
    return 0


def cmd_detect(args) -> int:
    protos = read_prototypes(args.protos, infer_format(args.protos))
    ds = read_dataset(args.input, infer_format(args.input))
    heads = HeadSelection.parse(args.heads)
    params = L0Params(tau=args.tau)

    def one(row):
        return row, detect(row.embedding, protos, heads, params)

    results = _map_ordered(one, list(ds), args.threads)
    header = ["id", "truth_a", "truth_y", "pred_a", "pred_y"]
    header += [f"pred_{h.value}" for h in heads.heads]
    rows = []
    for row, outcome in results:
        record = [row.id, row.attacked, row.label, outcome.attack_flag, outcome.predicted_class]
        record += [outcome.per_head[h] for h in heads.heads]
        rows.append(record)
    _write_csv(args.output, header, rows)
    _emit(args, args.output, [args.protos, args.input])
    return 0


def _read_predictions(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        required = ["id", "truth_a", "truth_y", "pred_a", "pred_y"]
        if header is None or header[: len(required)] != required:
            raise FormatError(f"predictions header must start with {','.join(required)}")
        out = []
        for i, rec in enumerate(reader):
            if len(rec) < len(required):
                raise FormatError(f"predictions row {i} has {len(rec)} fields")
            pred_y = int(rec[4]) if rec[4] != "" else None
            out.append((rec[0], rec[1] != "0", int(rec[2]), rec[3] != "0", pred_y))
    return out


def _read_compliance(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["id", "compliant"]:
            raise FormatError("compliance header must start with id,compliant")
        return {rec[0]: rec[1] not in ("0", "", "false") for rec in reader if rec}


def _report_lines(split: str, report: MetricReport | None):
    def show(x):
        return "n/a" if x is None else f"{x:.6f}"

    if report is None:
        return [f"[{split}]", "n = 0 (no rows)"], [f"{split}=n/a"]
    c = report.counts
    text = [
        f"[{split}]",
        f"n = {c.n}",
        f"tp = {c.tp}  tn = {c.tn}  fp = {c.fp}  fn = {c.fn}",
        f"accuracy = {show(report.accuracy)}",
        f"precision = {show(report.precision)}",
        f"recall = {show(report.recall)}",
        f"f1 = {show(report.f1)}",
    ]
    kv = [f"{split}.{k}={v}" for k, v in (
        ("n", c.n), ("tp", c.tp), ("tn", c.tn), ("fp", c.fp), ("fn", c.fn),
        ("accuracy", "n/a" if report.accuracy is None else repr(report.accuracy)),
        ("precision", "n/a" if report.precision is None else repr(report.precision)),
        ("recall", "n/a" if report.recall is None else repr(report.recall)),
        ("f1", "n/a" if report.f1 is None else repr(report.f1)),
    )]
    return text, kv


def cmd_evaluate(args) -> int:
    preds = _read_predictions(args.preds)
    compliance = _read_compliance(args.compliance) if args.compliance else {}
    cells_all, cells_true, cells_false = [], [], []
    for pid, truth_a, truth_y, pred_a, pred_y in preds:
        outcome = DetectionOutcome(attack_flag=pred_a, predicted_class=pred_y, per_head={})
        cell = score_sample((truth_a, truth_y), outcome)
        cells_all.append(cell)
        verdict = compliance.get(pid)
        if verdict is True:
            cells_true.append(cell)
        elif verdict is False:
            cells_false.append(cell)
    reports = {
        "overall": aggregate(cells_all),
        "compliant": aggregate(cells_true) if cells_true else None,
        "non_compliant": aggregate(cells_false) if cells_false else None,
    }
    text_lines, kv_lines = [], []
    for split in ("overall", "compliant", "non_compliant"):
        t, k = _report_lines(split, reports[split])
        text_lines.extend(t + [""])
        kv_lines.extend(k)
    with open(args.out_report, "w", encoding="utf-8") as fh:
        fh.write("\n".join(text_lines).rstrip("\n") + "\n")
    kv_path = f"{args.out_report}.kv"
    with open(kv_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(kv_lines) + "\n")
    inputs = [args.preds] + ([args.compliance] if args.compliance else [])
    _emit(args, args.out_report, inputs)
    _emit(args, kv_path, inputs)
    return 0


def cmd_check_theorem(args) -> int:
    protos = read_prototypes(args.protos, infer_format(args.protos))
    ds = read_dataset(args.input, infer_format(args.input))

    def one(row):
        report = classify_compliance(row.embedding, row.label, protos, args.epsilon, args.tau)
        lo, hi = report.tau_interval if report.tau_interval else (None, None)
        return [row.id, report.compliant, report.witness_coordinate, report.gamma_j,
                report.gap_j, lo, hi, report.worst_adversary_class]

    rows = _map_ordered(one, _clean_rows(ds), args.threads)
    header = ["id", "compliant", "witness_j", "gamma_j", "gap_j", "tau_lo", "tau_hi", "weakest_rival"]
    _write_csv(args.out, header, rows)
    _emit(args, args.out, [args.protos, args.input])
    return 0


def cmd_attack(args) -> int:
    protos = read_prototypes(args.protos, infer_format(args.protos))
    ds = read_dataset(args.input, infer_format(args.input))
    rows = _clean_rows(ds)

    def one(indexed):
        i, row = indexed
        result = search_dual_flip(
            row.embedding, row.label, protos, args.epsilon, args.tau, args.budget,
            restarts=args.restarts, free_delta=args.free_delta,
            seed=args.seed + i, mode=args.mode,
        )
        return [row.id, result.flipped_kl, result.flipped_l0, result.dual_flip_same_class,
                float(np.linalg.norm(result.delta))]

    out_rows = _map_ordered(one, list(enumerate(rows)), args.threads)
    _write_csv(args.out, ["id", "flipped_kl", "flipped_l0", "dual_flip", "delta_l2"], out_rows)
    _emit(args, args.out, [args.protos, args.input])
    return 0


def cmd_verify_exclusion(args) -> int:
    protos = read_prototypes(args.protos, infer_format(args.protos))
    ds = read_dataset(args.input, infer_format(args.input))
    rows = _clean_rows(ds)
    params = L0Params(tau=args.tau)

    def one(indexed):
        i, row = indexed
        report = classify_compliance(row.embedding, row.label, protos, args.epsilon, args.tau)
        clean = detect(row.embedding, protos, DEFAULT_HEADS, params)
        aligned = (not clean.attack_flag) and clean.predicted_class == row.label
        if not aligned:
            return [row.id, report.compliant, False, None]
        result = search_dual_flip(
            row.embedding, row.label, protos, args.epsilon, args.tau, args.budget,
            restarts=args.restarts, seed=args.seed + i,
        )
        return [row.id, report.compliant, True, result.dual_flip_same_class]

    out_rows = _map_ordered(one, list(enumerate(rows)), args.threads)
    _write_csv(args.out, ["id", "compliant", "searched", "dual_flip_found"], out_rows)
    _emit(args, args.out, [args.protos, args.input])
    compliant = sum(1 for r in out_rows if r[1])
    flips_on_compliant = sum(1 for r in out_rows if r[1] and r[3])
    print(f"compliant={compliant} searched={sum(1 for r in out_rows if r[2])} "
          f"dual_flips_on_compliant={flips_on_compliant}")
    return 0


def _read_features(path, f: int):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expect = ["id", "label"] + [f"x{i}" for i in range(f)]
        if header != expect:
            raise FormatError(f"feature header must be {','.join(expect)}")
        data = []
        for i, rec in enumerate(reader):
            if len(rec) != len(expect):
                raise FormatError(f"feature row {i} has {len(rec)} fields, expected {len(expect)}")
            data.append((np.array([float(x) for x in rec[2:]]), int(rec[1])))
    return data


def cmd_train(args) -> int:
    data = _read_features(args.data, args.f)
    labels = {cls for _, cls in data}
    if labels and (min(labels) < 0 or max(labels) >= args.m):
        raise InvalidInput(f"labels {sorted(labels)} outside --m {args.m}")
    cfg = TrainConfig(w_l0=args.w_l0, w_kl=args.w_kl, tau=args.tau, phi=args.phi,
                      learning_rate=args.lr, epochs=args.epochs,
                      batch_size=args.batch_size, seed=args.seed)
    enc, protos, history = train(data, cfg, dim_out=args.d, temperature=args.temperature)
    write_encoder(args.out_encoder, enc)
    _emit(args, args.out_encoder, [args.data])
    write_prototypes(protos, args.out_protos, infer_format(args.out_protos))
    _emit(args, args.out_protos, [args.data])
    history_path = f"{args.out_encoder}.history.csv"
    _write_csv(history_path, ["epoch", "loss_kl", "loss_l0", "total"],
               [[e, lk, ll, t] for e, lk, ll, t in history])
    _emit(args, history_path, [args.data])
    return 0


def cmd_oracle_check(args) -> int:
    from .attack import ConstrainedMaxProblem, brute_force_max, solve_closed_form
    from .errors import Infeasible

    rng = np.random.default_rng(args.seed)
    resolution = {2: 1e-3, 3: 1e-2, 4: 1e-2}.get(args.dim, 1e-2)
    within = 0
    for trial in range(args.trials):
        v = rng.standard_normal(args.dim)
        while float(np.linalg.norm(v)) == 0.0:
            v = rng.standard_normal(args.dim)
        eps = float(rng.uniform(0.5, 2.0))
        bounds = np.abs(rng.normal(0.0, 0.4 * eps, size=args.dim))
        k = int(rng.integers(0, args.dim + 1))
        problem = ConstrainedMaxProblem(v=v, epsilon=eps, min_bounds=bounds, k=k)
        try:
            _, exact = solve_closed_form(problem)
            exact_feasible = True
        except Infeasible:
            exact_feasible = False
        try:
            _, approx = brute_force_max(problem, resolution=resolution, seed=args.seed + trial)
            brute_feasible = True
        except Infeasible:
            brute_feasible = False
        if exact_feasible != brute_feasible:
            continue
        if not exact_feasible or abs(exact - approx) <= 5e-3 * max(1.0, abs(exact)):
            within += 1
    print(f"{within}/{args.trials} within 5e-3")
    return 0 if within == args.trials else 1


def cmd_gen_synthetic(args) -> int:
    if args.n < 1:
        raise InvalidInput(f"--n must be >= 1, got {args.n}")
    per_class = -(-args.n // args.classes)  # ceil
    protos, ds = generate_separable_instance(
        args.classes, args.dim, args.separation, args.seed,
        n_per_class=per_class, noise=args.noise,
    )
    targets = [args.n // args.classes + (1 if k < args.n % args.classes else 0)
               for k in range(args.classes)]
    kept: list[LabeledEmbedding] = []
    seen = {k: 0 for k in range(args.classes)}
    for row in ds:
        if seen[row.label] < targets[row.label]:
            kept.append(LabeledEmbedding(id=str(len(kept)), label=row.label,
                                         attacked=False, embedding=row.embedding))
            seen[row.label] += 1
    out_ds = EmbeddingDataset(d=args.dim, m=args.classes, rows=tuple(kept))
    write_dataset(out_ds, args.out, infer_format(args.out))
    _emit(args, args.out, [])
    if args.out_protos:
        write_prototypes(protos, args.out_protos, infer_format(args.out_protos))
        _emit(args, args.out_protos, [])
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protodetect",
                                     description="dual-metric nearest-prototype attack detector")
    subs = parser.add_subparsers(dest="subcommand", required=True)

    def sub(name, fn, **kwargs):
        p = subs.add_parser(name, **kwargs)
        p.set_defaults(func=fn, subcommand=name)
        return p

    p = sub("fit-prototypes", cmd_fit_prototypes, help="per-class mean prototypes from a clean dataset")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)

    p = sub("detect", cmd_detect, help="run the disagreement detector over a dataset")
    p.add_argument("--protos", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--heads", default="kl,l0")
    p.add_argument("--tau", type=float, default=0.75)
    p.add_argument("--output", required=True)
    p.add_argument("--threads", type=int, default=1)

    p = sub("evaluate", cmd_evaluate, help="confusion metrics from a predictions CSV")
    p.add_argument("--preds", required=True)
    p.add_argument("--compliance", default=None)
    p.add_argument("--out-report", required=True)

    p = sub("check-theorem", cmd_check_theorem, help="per-sample exclusion compliance")
    p.add_argument("--protos", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--tau", type=float, default=0.75)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)

    p = sub("attack", cmd_attack, help="search for head flips within a budget")
    p.add_argument("--protos", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--tau", type=float, default=0.75)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--mode", choices=("kl", "l0", "dual"), default="dual")
    p.add_argument("--free-delta", action="store_true")
    p.add_argument("--restarts", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)

    p = sub("verify-exclusion", cmd_verify_exclusion,
            help="compliance plus dual-flip search per sample")
    p.add_argument("--protos", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--tau", type=float, default=0.75)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--restarts", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)

    p = sub("train", cmd_train, help="train the affine-softmax encoder")
    p.add_argument("--data", required=True)
    p.add_argument("--f", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--w-l0", type=float, default=0.9)
    p.add_argument("--w-kl", type=float, default=0.1)
    p.add_argument("--tau", type=float, default=0.75)
    p.add_argument("--phi", type=float, default=0.5)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-encoder", required=True)
    p.add_argument("--out-protos", required=True)

    p = sub("oracle-check", cmd_oracle_check, help="closed-form maximizer vs brute force")
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--trials", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub("gen-synthetic", cmd_gen_synthetic, help="separable synthetic datasets")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--separation", type=float, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--out-protos", default=None)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single-line contract for runtime errors
        if os.environ.get("PROTODETECT_DEBUG"):
            raise
        print(f"error:{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
