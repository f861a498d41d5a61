"""Command-line interface.

Subcommands: enumerate, score, spectrum, eval, search, validate. Global
flags ``--seed``, ``--config`` (JSON mirroring the scoring/search fields,
with explicit flags taking precedence) and ``--threads``. All outputs are
byte-reproducible given identical inputs, flags and seeds; validation
failures exit nonzero with a structured diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from . import statlab
from .errors import FimnasError
from .evolve import SearchConfig, evolve
from .fim import (FimConfig, build_for_scoring, empirical_spectrum,
                  make_batch, policy_with_limits)
from .netcore import SamplingPolicy, select_params
from .ranking import PROXY_NAMES, ScoreTable, compute_proxy
from .space import (canonicalize, decode, enumerate_space, format_encoding,
                    get_space, parse_encoding)
from .tables import (eval_report, fmt_float, ingest_accuracy_table,
                     ingest_score_table, report_csv, report_markdown,
                     write_score_table)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fimnas",
        description="Training-free architecture scoring from the Fisher spectrum")
    parser.add_argument("--seed", type=int, default=None, help="master seed")
    parser.add_argument("--config", type=str, default=None,
                        help="JSON file with scoring/search settings")
    parser.add_argument("--threads", type=int, default=1,
                        help="parallel workers for per-architecture scoring")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("enumerate", help="list all encodings of a space")
    p.add_argument("--space", default="nb201toy")
    p.add_argument("--unique", action="store_true",
                   help="emit one representative per canonical class")
    p.add_argument("--cap", type=int, default=1_000_000)
    p.add_argument("--out", default=None)

    p = sub.add_parser("score", help="compute proxy scores for encodings")
    p.add_argument("encodings", nargs="*", help="encodings like nb201toy:0-1-2-3-4-0")
    p.add_argument("--space", default="nb201toy")
    p.add_argument("--all", action="store_true", help="score every encoding in the space")
    p.add_argument("--encodings-file", default=None, help="file with one encoding per line")
    p.add_argument("--proxy", action="append", default=None,
                   help=f"one of {', '.join(PROXY_NAMES)} (repeatable)")
    p.add_argument("--out", default=None)

    p = sub.add_parser("spectrum", help="dump the Fisher eigenvalues of one encoding")
    p.add_argument("encoding")
    p.add_argument("--out", default=None)

    p = sub.add_parser("eval", help="rank metrics of score tables against accuracies")
    p.add_argument("--scores", required=True)
    p.add_argument("--accuracies", required=True)
    p.add_argument("--p", type=int, default=1000, help="nDCG cutoff")
    p.add_argument("--ndcg-seeds", default="0,1,2,3,4")
    p.add_argument("--perm-samples", type=int, default=0,
                   help="add a permutation-test p-value column")
    p.add_argument("--markdown", action="store_true")
    p.add_argument("--out", default=None)

    p = sub.add_parser("search", help="evolutionary search under a FLOPs budget")
    p.add_argument("--space", default="nb201toy")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--population", type=int, default=None)
    p.add_argument("--budget", type=int, default=None, help="FLOPs budget")
    p.add_argument("--objective", default=None)
    p.add_argument("--external-scores", default=None)
    p.add_argument("--out-population", default=None)
    p.add_argument("--out-trace", default=None)

    p = sub.add_parser("validate", help="run the statistical validation experiments")
    p.add_argument("--experiment", default="all",
                   choices=["all", "mc-fim", "label-fim", "kl", "cramer-rao"])
    p.add_argument("--replications", type=int, default=200)
    p.add_argument("--markdown", action="store_true")
    p.add_argument("--out", default=None)
    return parser


def _load_config(args) -> dict:
    cfg = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            cfg = json.load(fh)
    return cfg


def _fim_config(args, file_cfg: dict) -> FimConfig:
    section = dict(file_cfg.get("fim", {}))
    policy = SamplingPolicy(**section.pop("policy", {}))
    cfg = FimConfig(policy=policy, **section)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _emit(text: str, out: str | None) -> None:
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _cmd_enumerate(args, file_cfg) -> int:
    spec = get_space(args.space)
    lines = []
    total = 0
    seen: set[str] = set()
    for enc in enumerate_space(spec, cap=args.cap):
        total += 1
        if args.unique:
            h = canonicalize(decode(enc)).canonical_hash
            if h in seen:
                continue
            seen.add(h)
        lines.append(format_encoding(enc))
    _emit("\n".join(lines) + "\n", args.out)
    if args.unique:
        print(f"encodings={total} unique={len(seen)}", file=sys.stderr)
    else:
        print(f"encodings={total}", file=sys.stderr)
    return 0


def _gather_encodings(args, spec):
    if args.all:
        return list(enumerate_space(spec))
    encs = [parse_encoding(e) for e in args.encodings]
    if args.encodings_file:
        with open(args.encodings_file, encoding="utf-8") as fh:
            encs.extend(parse_encoding(line.strip()) for line in fh if line.strip())
    if not encs:
        raise FimnasError("no encodings given; pass them as arguments, "
                          "--encodings-file or --all")
    return encs


def _cmd_score(args, file_cfg) -> int:
    spec = get_space(args.space)
    cfg = _fim_config(args, file_cfg)
    proxies = args.proxy or ["vkdnw_single"]
    encs = _gather_encodings(args, spec)
    canonicals = [canonicalize(decode(e)) for e in encs]

    def score_one(i: int) -> list[tuple[str, str, float]]:
        arch_id = format_encoding(encs[i])
        return [(arch_id, name, compute_proxy(name, canonicals[i], cfg))
                for name in proxies]

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            per_arch = list(pool.map(score_one, range(len(encs))))
    else:
        per_arch = [score_one(i) for i in range(len(encs))]
    rows = [row for chunk in per_arch for row in chunk]
    table = ScoreTable(rows=tuple(rows), provenance="native")
    _emit(write_score_table(table), args.out)
    return 0


def _cmd_spectrum(args, file_cfg) -> int:
    cfg = _fim_config(args, file_cfg)
    enc = parse_encoding(args.encoding)
    canonical = canonicalize(decode(enc))
    net = build_for_scoring(canonical, cfg)
    batch = make_batch(cfg, canonical.graph.input_shape)
    sel = select_params(net, policy_with_limits(cfg))
    spec = empirical_spectrum(net, batch, sel)
    lines = ["index,eigenvalue"]
    lines += [f"{i},{fmt_float(v)}" for i, v in enumerate(spec.eigenvalues)]
    _emit("\n".join(lines) + "\n", args.out)
    return 0


def _cmd_eval(args, file_cfg) -> int:
    scores = ingest_score_table(args.scores)
    acc = ingest_accuracy_table(args.accuracies)
    seeds = [int(s) for s in args.ndcg_seeds.split(",") if s != ""]
    report = eval_report(scores, acc, args.p, seeds, perm_samples=args.perm_samples)
    text = report_markdown(report) if args.markdown else report_csv(report)
    _emit(text, args.out)
    return 0


def _cmd_search(args, file_cfg) -> int:
    spec = get_space(args.space)
    section = dict(file_cfg.get("search", {}))
    cfg = SearchConfig(fim=_fim_config(args, file_cfg), **section)
    if args.iterations is not None:
        cfg = replace(cfg, iterations=args.iterations)
    if args.population is not None:
        cfg = replace(cfg, population_cap=args.population)
    if args.budget is not None:
        cfg = replace(cfg, flops_budget=args.budget)
    if args.objective is not None:
        cfg = replace(cfg, objective=args.objective)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.external_scores:
        cfg = replace(cfg, external_scores=ingest_score_table(args.external_scores))
    result = evolve(spec, cfg)
    pop_lines = ["arch_id,score,flops,aleph"]
    pop_lines += [f"{c.arch_id},{fmt_float(c.score)},{c.flops},{c.aleph}"
                  for c in result.population]
    _emit("\n".join(pop_lines) + "\n", args.out_population)
    trace_lines = ["iteration,best_score"]
    trace_lines += [f"{i},{fmt_float(v)}" for i, v in enumerate(result.trace)]
    _emit("\n".join(trace_lines) + "\n", args.out_trace)
    print(f"evaluated={result.evaluations} population={len(result.population)}",
          file=sys.stderr)
    return 0


def _cmd_validate(args, file_cfg) -> int:
    seed = args.seed if args.seed is not None else 7
    lines: list[str] = []
    md = args.markdown

    def emit_row(name: str, ok: bool, detail: str) -> None:
        status = "pass" if ok else "FAIL"
        if md:
            lines.append(f"| {name} | {status} | {detail} |")
        else:
            lines.append(f"{name},{status},{detail}")

    if md:
        lines.append("| experiment | status | detail |")
        lines.append("|---|---|---|")
    else:
        lines.append("experiment,status,detail")

    spec = statlab.SoftmaxModelSpec(seed=seed)
    if args.experiment in ("all", "mc-fim"):
        curve = statlab.mc_fim_convergence(spec, [200, 2000, 50_000], seed)
        err = dict(curve.rows)[50_000]
        emit_row("mc-fim-convergence", err <= 0.05,
                 f"rel Frobenius error at n=50000: {err:.4f}")
    if args.experiment in ("all", "label-fim"):
        rate = _label_fim_separation(seed)
        emit_row("label-fim-separation", rate >= 0.95,
                 f"relative difference >0.1 in {rate:.0%} of trials")
    if args.experiment in ("all", "kl"):
        worst = _kl_check_worst(seed)
        emit_row("kl-quadratic", worst <= 0.05,
                 f"max rel err at smallest scale: {worst:.4f}")
    if args.experiment in ("all", "cramer-rao"):
        cfg = statlab.MleExperimentConfig(
            model=spec, replications=args.replications, seed=seed)
        report = statlab.cramer_rao_experiment(cfg)
        mid = [r for r in report.rows if r.n == 2000]
        row = mid[0] if mid else report.rows[len(report.rows) // 2]
        emit_row("cramer-rao-bound", bool(row.ratios.min() >= 0.8),
                 f"min variance/bound ratio at n={row.n}: {row.ratios.min():.3f}")
    _emit("\n".join(lines) + "\n", args.out)
    return 0


def _label_fim_separation(seed: int, trials: int = 100) -> float:
    spec = statlab.SoftmaxModelSpec(seed=seed, pin_last_row=False)
    hits = 0
    for t in range(trials):
        s = statlab.SoftmaxModelSpec(seed=seed + t, pin_last_row=False)
        net = s.build_net()
        sel = s.full_selection(net)
        rng = np.random.default_rng(seed + 10_000 + t)
        x = rng.standard_normal((16, s.n_features))
        batch = statlab.batch_of(x)
        labels = rng.integers(0, s.num_classes, size=16)
        f_hat = statlab.empirical_fim_dense(net, batch, sel)
        g = statlab.label_fim(net, batch, labels, sel)
        if np.linalg.norm(g - f_hat) / np.linalg.norm(f_hat) > 0.1:
            hits += 1
    return hits / trials


def _kl_check_worst(seed: int, trials: int = 20) -> float:
    worst = 0.0
    for t in range(trials):
        s = statlab.SoftmaxModelSpec(seed=seed + t, pin_last_row=False)
        net = s.build_net()
        sel = s.full_selection(net)
        rng = np.random.default_rng(seed + 20_000 + t)
        x = rng.standard_normal((16, s.n_features))
        direction = rng.standard_normal(len(sel.entries))
        delta = statlab.embed_direction(net, sel, direction)
        scales = statlab.default_kl_scales(net, delta)
        rows = statlab.kl_quadratic_check(net, direction, scales,
                                          statlab.batch_of(x), sel)
        worst = max(worst, rows[-1][3])
    return worst


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        file_cfg = _load_config(args)
        handler = {
            "enumerate": _cmd_enumerate,
            "score": _cmd_score,
            "spectrum": _cmd_spectrum,
            "eval": _cmd_eval,
            "search": _cmd_search,
            "validate": _cmd_validate,
        }[args.command]
        return handler(args, file_cfg)
    except FimnasError as exc:
        print(f"fimnas: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"fimnas: error: OSError: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
