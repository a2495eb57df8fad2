"""``formulanet`` command line.

Exit codes: 0 success, 1 I/O failure, 2 bad user input, 3 internal error.
Results go to stdout as ``key=value`` records; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .data import HolStepData, SplitManifest, build_vocab, list_conjecture_files, parse_holstep_file
from .graph import MODES, build_graph, dumps_graph, export_dot, graph_stats, rename_ast_variables
from .hol import HolSyntaxError, close_formula, parse, print_formula, tokenize
from .model import embed_graph, load_checkpoint
from .synth import write_synthetic_corpus
from .train import (
    TrainRunConfig,
    evaluate,
    evaluate_checkpoint,
    nearest_neighbors,
    read_config_file,
    train,
)

log = logging.getLogger("formulanet")


class UserError(Exception):
    """Bad flags or inputs; reported with exit code 2."""


def _line_col(text: str, pos: int) -> tuple:
    line = text.count("\n", 0, pos) + 1
    col = pos - (text.rfind("\n", 0, pos) + 1) + 1
    return line, col


def _parse_closed(text: str, constants=None):
    try:
        return close_formula(parse(tokenize(text)), constants)
    except HolSyntaxError as exc:
        if exc.position is not None:
            line, col = _line_col(text, exc.position)
            raise UserError(f"parse error at line {line}, column {col}: {exc.detail}") from exc
        raise UserError(f"parse error: {exc}") from exc


def _constants(arg):
    if not arg:
        return None
    path = Path(arg)
    if path.exists():
        return set(path.read_text(encoding="utf-8").split())
    return set(arg.split(","))


def _formula_arg(args) -> str:
    if args.formula is not None:
        return args.formula
    if getattr(args, "file", None):
        return Path(args.file).read_text(encoding="utf-8").strip()
    raise UserError("give --formula or --file")


# --------------------------------------------------------------------------
# subcommands


def cmd_graph(args) -> int:
    text = _formula_arg(args)
    g = build_graph(_parse_closed(text, _constants(args.constants)), args.mode, _constants(args.constants))
    if args.dot:
        Path(args.dot).write_text(export_dot(g), encoding="utf-8")
    if args.wire:
        Path(args.wire).write_text(dumps_graph(g), encoding="utf-8")
    if args.stats or not (args.dot or args.wire):
        s = graph_stats(g)
        print(f"nodes={s['nodes']} edges={s['edges']} treelets={s['treelets']}")
    return 0


def cmd_build_vocab(args) -> int:
    files = list_conjecture_files(args.train_dir)
    constants = _constants(args.constants)
    records = [parse_holstep_file(f, constants) for f in files]
    vocab = build_vocab(records, mode=args.mode)
    Path(args.out).write_text(vocab.dumps(), encoding="utf-8")
    print(f"tokens={len(vocab)} constants={len(vocab) - 3} files={len(files)}")
    return 0


def _run_config(args) -> TrainRunConfig:
    values = read_config_file(args.config) if args.config else {}
    for f in fields(TrainRunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    if args.out_dir:
        values["out_dir"] = args.out_dir
    try:
        return TrainRunConfig.from_dict(values)
    except (KeyError, ValueError) as exc:
        raise UserError(str(exc)) from exc


def cmd_train(args) -> int:
    run = _run_config(args)
    if not run.out_dir:
        raise UserError("train needs --out-dir (or out_dir in the config)")
    if not run.manifest:
        run.manifest = str(Path(run.out_dir) / "manifest.txt")
    Path(run.out_dir).mkdir(parents=True, exist_ok=True)
    (Path(run.out_dir) / "run.cfg").write_text(run.dumps(), encoding="utf-8")
    result = train(run)
    for line in result.metrics.lines():
        print(line)
    return 0


def _checkpoint_data(args, meta) -> HolStepData:
    run = meta.get("run", {})
    manifest = args.manifest or run.get("manifest")
    if not manifest:
        raise UserError("no manifest recorded in checkpoint; pass --manifest")
    mode = args.mode or run.get("mode", "full")
    return HolStepData(SplitManifest.load(manifest), mode)


def cmd_eval(args) -> int:
    params, vocab, _, meta = load_checkpoint(args.checkpoint)
    if args.setting and args.setting != params.config.setting:
        raise UserError(f"checkpoint was trained for the {params.config.setting} setting")
    data = _checkpoint_data(args, meta)
    if args.rename_seed is not None:
        data = data.renamed(args.rename_seed)
    if args.check_vocab:
        accs = evaluate_checkpoint(args.checkpoint, data, args.split)
    else:
        accs = evaluate(params, vocab, data, args.split)
    fields_ = [f"split={args.split}", f"setting={params.config.setting}"]
    fields_ += [f"acc_step{t}={a:.6f}" for t, a in enumerate(accs)]
    fields_.append(f"accuracy={accs[-1]:.6f}")
    print(" ".join(fields_))
    if args.access_log:
        Path(args.access_log).write_text("".join(f"{r} {k}\n" for r, k in data.cache.access_log), encoding="utf-8")
    return 0


def cmd_embed(args) -> int:
    params, vocab, _, _ = load_checkpoint(args.checkpoint)
    g = build_graph(_parse_closed(_formula_arg(args)), args.mode)
    emb = embed_graph(g, params, vocab)
    lines = [f"step={t} " + " ".join(repr(float(v)) for v in vec) for t, vec in enumerate(emb.pooled)]
    out = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(out, encoding="utf-8")
    else:
        sys.stdout.write(out)
    return 0


def cmd_nn_query(args) -> int:
    params, vocab, _, _ = load_checkpoint(args.checkpoint)
    query = build_graph(_parse_closed(args.formula), args.mode)
    corpus_text = [ln.strip() for ln in Path(args.corpus).read_text(encoding="utf-8").splitlines() if ln.strip()]
    corpus = [build_graph(_parse_closed(t), args.mode) for t in corpus_text]
    if not 0 <= args.node < query.n_nodes:
        raise UserError(f"node {args.node} out of range (graph has {query.n_nodes} nodes)")
    hits = nearest_neighbors(params, vocab, (query, args.node), corpus, args.k, args.step)
    for rank, (gi, ni, dist) in enumerate(hits, start=1):
        print(f"rank={rank} graph={gi} node={ni} name={corpus[gi].names[ni]} distance={dist:.6g}")
    return 0


def rename_holstep_text(text: str, seed) -> str:
    """Rename bound variables in every formula line of one HolStep file."""
    out = []
    last = None
    for idx, line in enumerate(text.splitlines()):
        prefix = line[:1]
        if prefix in ("C", "D", "+", "-") and line[1:2] == " ":
            try:
                ast = close_formula(parse(tokenize(line[2:])))
                last = print_formula(rename_ast_variables(ast, f"{seed}:{idx}"))
                out.append(f"{prefix} |- {last}")
                continue
            except HolSyntaxError:
                last = None
        elif prefix == "T" and last is not None:
            out.append(f"T |- {last}")
            last = None
            continue
        out.append(line)
    return "\n".join(out) + "\n"


def cmd_rename_val(args) -> int:
    src, dst = Path(args.in_dir), Path(args.out_dir)
    dst.mkdir(parents=True, exist_ok=True)
    files = list_conjecture_files(src)
    for f in files:
        (dst / f.name).write_text(rename_holstep_text(f.read_text(encoding="utf-8"), args.seed), encoding="utf-8")
    print(f"files={len(files)} seed={args.seed}")
    return 0


def cmd_synth(args) -> int:
    train_files, test_files = write_synthetic_corpus(args.out_dir, args.n_train, args.n_test, args.pairs, args.seed)
    print(f"train_files={len(train_files)} test_files={len(test_files)} pairs_per_conjecture={args.pairs}")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="formulanet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("graph", help="build a formula graph; print counts or write DOT")
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--formula")
    src.add_argument("--file")
    g.add_argument("--mode", choices=MODES, default="full")
    g.add_argument("--dot", help="write Graphviz DOT here")
    g.add_argument("--wire", help="write the line-oriented graph format here")
    g.add_argument("--stats", action="store_true", help="print node/edge/treelet counts")
    g.add_argument("--constants", help="comma list or file of constant names")
    g.set_defaults(func=cmd_graph)

    v = sub.add_parser("build-vocab", help="token vocabulary of a training directory")
    v.add_argument("--train-dir", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--mode", choices=MODES, default="full")
    v.add_argument("--constants")
    v.set_defaults(func=cmd_build_vocab)

    t = sub.add_parser("train", help="train a model; flags override the config file")
    t.add_argument("--config")
    t.add_argument("--out-dir")
    for f in fields(TrainRunConfig):
        if f.name == "out_dir":
            continue
        flag = "--" + f.name.replace("_", "-")
        t.add_argument(flag, dest=f.name, default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy of every step head on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="val", choices=("train", "val", "test"))
    e.add_argument("--setting", choices=("conditional", "unconditional"))
    e.add_argument("--manifest")
    e.add_argument("--mode", choices=MODES)
    e.add_argument("--rename-seed", type=int, default=None, help="evaluate on renamed formulas")
    e.add_argument("--no-check-vocab", dest="check_vocab", action="store_false")
    e.add_argument("--access-log", help="write every graph lookup (role, key) here")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("embed", help="pooled embedding of one formula after each step")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--formula", required=True)
    m.add_argument("--mode", choices=MODES, default="full")
    m.add_argument("--out")
    m.set_defaults(func=cmd_embed)

    q = sub.add_parser("nn-query", help="nearest corpus nodes to one node of a formula")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--formula", required=True)
    q.add_argument("--node", type=int, required=True)
    q.add_argument("-k", type=int, default=5)
    q.add_argument("--corpus", required=True, help="file with one formula per line")
    q.add_argument("--step", type=int, default=None)
    q.add_argument("--mode", choices=MODES, default="full")
    q.set_defaults(func=cmd_nn_query)

    r = sub.add_parser("rename-val", help="copy HolStep files with bound variables renamed")
    r.add_argument("--in-dir", required=True)
    r.add_argument("--out-dir", required=True)
    r.add_argument("--seed", type=int, default=7)
    r.set_defaults(func=cmd_rename_val)

    s = sub.add_parser("synth", help="write a synthetic HolStep-format corpus")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--n-train", type=int, default=240)
    s.add_argument("--n-test", type=int, default=20)
    s.add_argument("--pairs", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (HolSyntaxError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
