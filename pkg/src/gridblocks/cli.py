"""Command-line front end.

Every subcommand reads a bundled case name or a case file, prints a short
summary, and writes machine-readable files when ``--output-dir`` is given.
Outputs are byte-identical for identical inputs unless ``--timings`` asks for
wall-clock numbers.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .clustering import METHODS, FlowWeights, compare_methods, obi_solve
from .errors import GridBlocksError, UsageError
from .factors import glodf, influence_graph, lodf_matrix, ptdf_matrix
from .graphs import DEFAULT_TREE_CAP, block_decomposition, bridges_and_bridge_blocks
from .network import REBALANCE_MODES, PowerNetwork, load_case, rebalance, to_json, write_matpower
from .spectral import build_system, dc_flow
from .switching import _isolate, one_shot, recursive_refine

log = logging.getLogger("gridblocks")

FORMATS = ("json", "csv", "dot")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # noqa: D401
        self.print_usage(sys.stderr)
        self.exit(UsageError.exit_status, f"{self.prog}: error[{UsageError.code}]: {message}\n")


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

class Output:
    def __init__(self, directory: str | None, formats: Sequence[str]):
        self.dir = Path(directory) if directory else None
        self.formats = set(formats)
        self.written: list[Path] = []

    def wants(self, fmt: str) -> bool:
        return self.dir is not None and fmt in self.formats

    def write(self, name: str, text: str) -> None:
        if self.dir is None:
            return
        self.dir.mkdir(parents=True, exist_ok=True)
        path = self.dir / name
        path.write_text(text)
        self.written.append(path)

    def json(self, name: str, data) -> None:
        if self.wants("json"):
            self.write(name, dumps(data))

    def csv(self, name: str, header: Sequence[str], rows) -> None:
        if self.wants("csv"):
            self.write(name, csv_text(header, rows))


def _clean(x):
    if isinstance(x, float):
        return None if math.isinf(x) or math.isnan(x) else x
    if isinstance(x, (np.floating,)):
        return _clean(float(x))
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    return x


def dumps(data) -> str:
    return json.dumps(_clean(data), indent=1, sort_keys=True) + "\n"


def csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])
    return buf.getvalue()


def _matrix_rows(values: np.ndarray, row_ids, col_ids):
    for r, rid in enumerate(row_ids):
        yield [rid] + [float(values[r, c]) if np.isfinite(values[r, c]) else None for c in range(len(col_ids))]


# ---------------------------------------------------------------------------
# shared setup
# ---------------------------------------------------------------------------

def _load(args) -> tuple[PowerNetwork, np.ndarray]:
    net = load_case(args.input)
    p = rebalance(net.injections, net, args.rebalance, args.tolerance)
    return net, p


def _ids_arg(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated line ids, got {text!r}") from None


def _positive(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive: {text!r}")
    return v


def _formats(text: str) -> list[str]:
    fmts = [t for t in text.split(",") if t]
    bad = [f for f in fmts if f not in FORMATS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown format(s) {bad}; choose from {FORMATS}")
    return fmts


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def stats_row(net: PowerNetwork) -> dict:
    """Edge, bridge and bridge-block counts; parallel circuits count separately."""
    bb = bridges_and_bridge_blocks(net, circuits=True)
    edges = sum(ln.multiplicity for ln in net.lines)
    return {
        "network": net.name,
        "buses": net.n,
        "edges": edges,
        "bridges": len(bb.bridges),
        "pct_bridges": round(100.0 * len(bb.bridges) / edges, 2) if edges else 0.0,
        "bridge_blocks": bb.num_blocks,
        "nontrivial_sizes": bb.nontrivial_sizes,
    }


def decomposition_dot(net: PowerNetwork) -> str:
    """Bridge-block tree and block-cut tree as two DOT graphs."""
    bb = bridges_and_bridge_blocks(net)
    bd = block_decomposition(net)
    out = [f"graph bridge_blocks {{"]
    for k, c in enumerate(bb.blocks.clusters):
        out.append(f'  bb{k} [label="{len(c)} bus(es)"];')
    out += [f'  bb{a} -- bb{b} [label="{e}"];' for a, b, e in bb.bb_tree]
    out.append("}")
    out.append("graph block_cut_tree {")
    for k, lines in enumerate(bd.blocks):
        out.append(f'  b{k} [shape=box, label="{len(lines)} line(s)"];')
    for v in sorted(bd.cut_vertices):
        out.append(f'  v{v} [label="bus {net.buses[v].original_id}"];')
        out += [f"  v{v} -- b{k};" for k in bd.blocks_of_vertex(v)]
    out.append("}")
    return "\n".join(out) + "\n"


def cmd_stats(args, out: Output) -> int:
    rows = []
    for source in args.input:
        t0 = time.perf_counter()
        net = load_case(source)
        row = stats_row(net)
        if out.wants("dot"):
            out.write(f"{net.name}_blocks.dot", decomposition_dot(net))
        if args.timings:
            row["runtime_s"] = time.perf_counter() - t0
        rows.append(row)
        print(f"{row['network']:<20} edges={row['edges']:<5} bridges={row['bridges']:<4} "
              f"pct={row['pct_bridges']:.2f} blocks={row['bridge_blocks']:<4} sizes={row['nontrivial_sizes']}")
    out.json("stats.json", rows)
    header = ["network", "buses", "edges", "bridges", "pct_bridges", "bridge_blocks", "nontrivial_sizes"]
    if args.timings:
        header.append("runtime_s")
    out.csv("stats.csv", header,
            ([r[h] if h != "nontrivial_sizes" else " ".join(map(str, r[h])) for h in header] for r in rows))
    return 0


def cmd_flow(args, out: Output) -> int:
    net, p = _load(args)
    f = dc_flow(build_system(net), net, p, args.tolerance)
    rows = []
    for ln, fl in zip(net.lines, f):
        load = None if math.isinf(ln.capacity) else abs(float(fl)) / ln.capacity
        rows.append([ln.id, net.buses[ln.from_bus].original_id, net.buses[ln.to_bus].original_id,
                     float(fl), None if math.isinf(ln.capacity) else ln.capacity, load])
    loads = [r[5] for r in rows if r[5] is not None]
    print(f"{net.name}: {net.m} lines, max |f| = {np.abs(f).max() if net.m else 0:.4f} MW, "
          f"gamma = {max(loads) if loads else 0.0:.4f}")
    out.csv("flows.csv", ["line_id", "from_bus", "to_bus", "flow_mw", "capacity_mw", "loading"], rows)
    out.json("flows.json", {"network": net.name, "injections_mw": p.tolist(),
                            "flows_mw": {str(r[0]): r[3] for r in rows}})
    return 0


def cmd_factors(args, out: Output) -> int:
    net, p = _load(args)
    sys_ = build_system(net)
    D = ptdf_matrix(sys_, net)
    ids = list(D.line_ids)
    out.csv("ptdf.csv", ["line_id"] + ids, _matrix_rows(D.values, ids, ids))
    K, is_bridge = lodf_matrix(sys_, net)
    out.csv("lodf.csv", ["line_id"] + ids, _matrix_rows(K, ids, ids))
    summary = {"network": net.name, "lines": net.m, "bridges": [ids[k] for k in np.flatnonzero(is_bridge)]}
    if args.outage:
        G = glodf(sys_, net, args.outage)
        out.csv("glodf.csv", ["line_id"] + list(G.outage_set), _matrix_rows(G.values, G.survivors, G.outage_set))
        f = dc_flow(sys_, net, p, args.tolerance)
        delta = G.flow_change(f[net.positions(G.outage_set)])
        summary["outage"] = list(G.outage_set)
        summary["condition"] = G.condition
        summary["flow_change_mw"] = {str(e): float(d) for e, d in zip(G.survivors, delta)}
        print(f"outage {list(G.outage_set)}: max |df| = {np.abs(delta).max() if delta.size else 0:.4f} MW")
    print(f"{net.name}: PTDF and LODF for {net.m} lines ({len(summary['bridges'])} bridges)")
    out.json("factors.json", summary)
    return 0


def cmd_influence(args, out: Output) -> int:
    net, _ = _load(args)
    ig = influence_graph(build_system(net), net, args.k_min)
    comps = ig.nontrivial_components()
    print(f"{net.name}: influence graph at K_min={args.k_min}: {len(ig.edges)} edges, "
          f"{len(comps)} nontrivial component(s), sizes {[len(c) for c in comps]}")
    out.json("influence.json", {"k_min": args.k_min, "nodes": list(ig.nodes),
                                "edges": [list(e) for e in ig.edges],
                                "components": ig.components()})
    if out.wants("dot"):
        lines = [f"graph influence {{", f"  // K_min = {args.k_min!r}"]
        lines += [f"  {e};" for e in ig.nodes]
        lines += [f"  {a} -- {b};" for a, b in ig.edges]
        lines.append("}")
        out.write("influence.dot", "\n".join(lines) + "\n")
    return 0


def cmd_partition(args, out: Output) -> int:
    net, p = _load(args)
    f = dc_flow(build_system(net), net, p, args.tolerance)
    if args.scope == "largest-block":
        block = bridges_and_bridge_blocks(net).largest_block()
        sub, vmap, q = _isolate(net, p, f, block)
        f_sub = np.array([f[net.position(int(e))] for e in sub.line_ids])
    else:
        sub, vmap, f_sub = net, np.arange(net.n), f
    w = FlowWeights.from_flows(sub, f_sub)
    methods = METHODS if args.method == "all" else (args.method,)
    results = {}
    for m in methods:
        res = obi_solve(w, sub, args.b, m)
        results[m] = {
            "clusters": [[net.buses[int(vmap[v])].original_id for v in c] for c in res.partition.clusters],
            "clusters_internal": [[int(vmap[v]) for v in c] for c in res.partition.clusters],
            "Q": res.Q,
            "Q_n": res.Q_n,
        }
        print(f"{m:<12} b={res.partition.b} Q={res.Q:.4f} Q_n={res.Q_n if res.Q_n is None else round(res.Q_n, 6)} "
              f"sizes={sorted(res.partition.sizes, reverse=True)}")
    out.json("partition.json", {"network": net.name, "scope": args.scope, "b": args.b, "results": results})
    rows = compare_methods(w, sub, args.b, methods)
    header = ["method", "b", "Q", "Q_n", "cross_edges", "cross_edge_fraction", "sizes"]
    if args.timings:
        header.insert(1, "runtime_s")
    out.csv("comparison.csv", header, (
        [getattr(r, h) if h != "sizes" else " ".join(map(str, r.sizes)) for h in header] for r in rows))
    return 0


def cmd_refine(args, out: Output) -> int:
    net, p = _load(args)
    if args.mode == "one-shot":
        plan = one_shot(net, p, args.b, args.method, args.tree_cap)
        after = net.without_lines(plan.switched_lines)
        data = plan.to_dict()
        data["network"] = net.name
        print(f"{net.name}: one-shot b={args.b} opened {len(plan.switched_lines)} line(s) "
              f"{list(plan.switched_lines)}; gamma {plan.extras['gamma_before']:.4f} -> {plan.gamma:.4f}; "
              f"bridge-blocks {plan.resulting_bb.num_blocks}")
        out.json("plan.json", data)
    else:
        trace = recursive_refine(net, p, args.i_max, args.delta, args.method, args.tree_cap)
        after = trace.network
        data = trace.to_dict(timings=args.timings)
        data["network"] = net.name
        print(f"{net.name}: recursive, {len(trace.iterations)} iteration(s), stop={trace.stop_reason}; "
              f"opened {list(trace.switched_lines)}; bridge-blocks {trace.decomposition.num_blocks}")
        for it in trace.iterations:
            print(f"  iter {it.index}: opened {list(it.switched)} gamma={it.gamma:.4f} sizes={list(it.bb_sizes)}")
        out.json("trace.json", data)
    if out.dir is not None:
        out.write("network_after.json", to_json(after))
        out.write("network_after.m", write_matpower(after))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--output-dir", help="directory for output files (none written if omitted)")
    common.add_argument("--formats", type=_formats, default=list(FORMATS),
                        help="comma-separated subset of json,csv,dot (default: all)")
    common.add_argument("--rebalance", choices=REBALANCE_MODES, default="proportional-generators",
                        help="how to balance case-file injections per island")
    common.add_argument("--tolerance", type=_positive, default=1e-6, help="balance tolerance in MW")
    common.add_argument("--timings", action="store_true", help="include wall-clock times in outputs")
    common.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = _Parser(prog="gridblocks", description="Bridge-block analysis and refinement of transmission networks.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("stats", parents=[common], help="edge, bridge and bridge-block counts")
    s.add_argument("input", nargs="+", help="bundled case names or case files")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("flow", parents=[common], help="DC power flow")
    s.add_argument("input")
    s.set_defaults(func=cmd_flow)

    s = sub.add_parser("factors", parents=[common], help="PTDF, LODF and GLODF matrices")
    s.add_argument("input")
    s.add_argument("--outage", type=_ids_arg, help="line ids of a simultaneous outage, e.g. 3,7")
    s.set_defaults(func=cmd_factors)

    s = sub.add_parser("influence", parents=[common], help="LODF influence graph")
    s.add_argument("input")
    s.add_argument("--k-min", type=_positive, default=0.005)
    s.set_defaults(func=cmd_influence)

    s = sub.add_parser("partition", parents=[common], help="flow-weighted modularity clustering")
    s.add_argument("input")
    s.add_argument("--b", type=int, default=2)
    s.add_argument("--method", choices=list(METHODS) + ["all"], default="all")
    s.add_argument("--scope", choices=["largest-block", "network"], default="largest-block")
    s.set_defaults(func=cmd_partition)

    s = sub.add_parser("refine", parents=[common], help="bridge-block refinement by line switching")
    s.add_argument("input")
    s.add_argument("--mode", choices=["one-shot", "recursive"], default="recursive")
    s.add_argument("--b", type=int, default=4, help="cluster count for one-shot mode")
    s.add_argument("--i-max", type=int, default=3)
    s.add_argument("--delta", type=_positive, default=1.0)
    s.add_argument("--method", choices=METHODS, default="fastgreedy")
    s.add_argument("--tree-cap", type=int, default=DEFAULT_TREE_CAP)
    s.set_defaults(func=cmd_refine)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "b", 2) < 1 or getattr(args, "i_max", 0) < 0 or getattr(args, "tree_cap", 1) < 1:
        parser.error("--b, --i-max and --tree-cap must be positive (i-max may be 0)")
    out = Output(args.output_dir, args.formats)
    try:
        return args.func(args, out)
    except GridBlocksError as exc:
        print(f"gridblocks: error[{exc.code}]: {exc}", file=sys.stderr)
        islands = getattr(exc, "islands", None)
        if islands:
            print(f"gridblocks: islands: {[sorted(i) for i in islands]}", file=sys.stderr)
        return exc.exit_status


if __name__ == "__main__":
    sys.exit(main())
