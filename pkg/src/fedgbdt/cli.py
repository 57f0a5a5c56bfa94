"""Command line entry point.

    fedgbdt centralized [--data CSV] [--trees 20] ...
    fedgbdt vertical    --participants 3 --epsilon 0.5,1,2,4,inf
    fedgbdt horizontal  --participants 4 [--exact]
    fedgbdt split-data  --data CSV --axis vertical --participants 2 --out DIR
    fedgbdt eval        --model model.fbm --thresholds thresholds.fbt --data CSV

Every training run prints a key=value report (one block per epsilon) and,
with ``--out``, writes ``report.txt``, ``model.fbm``, ``thresholds.fbt`` and
a message transcript. ``--config FILE`` reads the same options from
``key = value`` lines (optionally under a ``[run]`` header); flags win.

Distributed roles run one process per participant over TCP::

    fedgbdt vertical --role participant:0 --peers 0=hostA:7000,1=hostB:7000 \\
        --data train_0.csv --test-data test_0.csv --schema schema.json
    fedgbdt vertical --role coordinator --peers ... --data train_1.csv ...

The coordinator is the highest participant id: the label holder in the
vertical setting, the aggregator in the horizontal one.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import math
import re
import sys
import time
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .data import (Dataset, Schema, auc, load_csv, partition_horizontal, partition_vertical,
                   save_csv, split_train_test)
from .errors import FedGbdtError
from .gbdt import GbdtModel, TrainConfig, predict_batch, train_centralized
from .horizontal import HorizontalParticipant, predict_local, simulate_horizontal
from .secagg import AggParams
from .transport import Channel, NetProfile, SimNetwork, SocketEndpoint
from .vertical import ActiveParticipant, PassiveParticipant, VerticalSimulation

log = logging.getLogger("fedgbdt")

# option name -> (type, default); shared by flags and config files
OPTIONS = {
    "data": (str, None),
    "test_data": (str, None),
    "schema": (str, None),
    "participants": (int, 3),
    "epsilon": (str, "inf"),
    "buckets": (int, 16),
    "trees": (int, 20),
    "depth": (int, 3),
    "reg_lambda": (float, 1.0),
    "learning_rate": (float, 0.3),
    "base_score": (str, "zero"),
    "seed": (int, 0),
    "repeat": (int, 1),
    "net_profile": (str, "lan"),
    "net_mode": (str, "virtual"),
    "role": (str, "simulate-all"),
    "peers": (str, None),
    "agg_profile": (str, "default"),
    "modulus_bits": (int, 40),
    "scale_bits": (int, 20),
    "exact": (bool, False),
    "timeout": (float, 300.0),
    "out": (str, None),
}


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    return str(text).strip().lower() in ("1", "true", "yes", "on")


def read_config(path) -> Dict[str, object]:
    text = Path(path).read_text()
    if not re.search(r"^\s*\[", text, re.M):
        text = "[run]\n" + text
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise FedGbdtError(f"{path}: {exc}") from None
    out = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            key = key.replace("-", "_")
            if key not in OPTIONS:
                raise FedGbdtError(f"{path}: unknown option {key!r}")
            kind = OPTIONS[key][0]
            try:
                out[key] = _bool(value) if kind is bool else kind(value)
            except ValueError:
                raise FedGbdtError(f"{path}: bad value {value!r} for {key!r}") from None
    return out


def resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset flags from the config file, then from defaults."""
    from_file = read_config(args.config) if getattr(args, "config", None) else {}
    for key, (_, default) in OPTIONS.items():
        if getattr(args, key, None) is None:
            setattr(args, key, from_file.get(key, default))
    return args


def parse_epsilons(text: str) -> List[float]:
    out = []
    for part in str(text).split(","):
        part = part.strip().lower()
        try:
            eps = math.inf if part in ("inf", "infinity", "none") else float(part)
        except ValueError:
            raise FedGbdtError(f"cannot parse epsilon {part!r}") from None
        if not eps > 0:
            raise FedGbdtError(f"epsilon must be positive, got {part!r}")
        out.append(eps)
    return out


def parse_role(text: str):
    """``simulate-all``, ``coordinator`` or ``participant:<id>``."""
    if text in ("simulate-all", "coordinator"):
        return text, None
    m = re.fullmatch(r"participant[:=]?(\d+)", text)
    if not m:
        raise FedGbdtError(f"unknown role {text!r}")
    return "participant", int(m.group(1))


def parse_peers(text: str) -> Dict[int, tuple]:
    peers = {}
    for part in text.split(","):
        pid, addr = part.split("=")
        host, port = addr.rsplit(":", 1)
        peers[int(pid)] = (host, int(port))
    return peers


def train_config(opts, epsilon: float, seed: int) -> TrainConfig:
    return TrainConfig(num_trees=opts.trees, tree_depth=opts.depth, reg_lambda=opts.reg_lambda,
                       learning_rate=opts.learning_rate, num_buckets=opts.buckets,
                       epsilon=epsilon, base_score_init=opts.base_score, rng_seed=seed,
                       fixed_point_scale=1 << opts.scale_bits)


def agg_params(opts) -> AggParams:
    make = AggParams.test_profile if opts.agg_profile == "test" else AggParams.default
    return make(modulus=1 << opts.modulus_bits, scale=1 << opts.scale_bits)


def default_data() -> tuple:
    base = resources.files("fedgbdt") / "data"
    return str(base / "synth.csv"), str(base / "synth_schema.json")


def load_full(opts) -> tuple:
    data, schema_path = opts.data, opts.schema
    if data is None:
        data, schema_path = default_data()
    schema = Schema.load(schema_path) if schema_path else None
    return load_csv(data, schema), schema


def load_shard(path, schema: Optional[Schema]) -> Dataset:
    """Load one participant's file; column positions come from the full schema."""
    ds = load_csv(path)
    if schema is None:
        return ds
    names = ds.schema.names
    missing = [n for n in names if n not in schema.names]
    if missing:
        raise FedGbdtError(f"{path}: columns {missing} are not in the schema")
    index = [schema.names.index(n) for n in names]
    sub = Schema([schema.features[i] for i in index], ds.schema.label, ds.schema.id_column)
    order = np.argsort(ds.ids, kind="stable")
    return Dataset(ds.X[order], ds.ids[order], None if ds.y is None else ds.y[order], sub, index)


def format_report(report: Dict[str, object]) -> str:
    def fmt(v):
        if isinstance(v, float):
            return "inf" if v == math.inf else f"{v:.6g}"
        return str(v)
    return "\n".join(f"{k}={fmt(v)}" for k, v in report.items())


def _base_report(mode: str, opts, l: int, epsilon: float) -> Dict[str, object]:
    return {"mode": mode, "role": opts.role, "l": l, "q": opts.buckets, "epsilon": epsilon,
            "trees": opts.trees, "depth": opts.depth, "lambda": opts.reg_lambda,
            "eta": opts.learning_rate, "seed": opts.seed, "repeat": opts.repeat}


def _network_report(net) -> Dict[str, object]:
    out = dict(net.stats.report())
    out["bytes_total"] = net.stats.total_bytes()
    if hasattr(net, "profile"):
        out["net_profile"] = f"latency_ms={net.profile.latency_ms},bandwidth_kbps={net.profile.bandwidth_kbps}"
        out["modeled_network_seconds"] = round(net.stats.modeled_seconds, 6)
    return out


def _transcript(net) -> str:
    return "\n".join(f"{e.sender}\t{e.recipient}\t{e.channel.name.lower()}\t{len(e.payload)}"
                     for e in net.transcript)


def _write(out: Optional[str], tag: str, report: Dict[str, object],
           model: Optional[GbdtModel], transcript: Optional[str]) -> None:
    if not out:
        return
    d = Path(out) / tag if tag else Path(out)
    d.mkdir(parents=True, exist_ok=True)
    (d / "report.txt").write_text(format_report(report) + "\n")
    if model is not None:
        (d / "model.fbm").write_bytes(model.to_bytes())
        if model.thresholds:
            (d / "thresholds.fbt").write_bytes(model.thresholds_to_bytes())
    if transcript is not None:
        (d / "transcript.tsv").write_text("sender\trecipient\tchannel\tbytes\n" + transcript + "\n")


def _sweep(opts, mode: str, run_once) -> int:
    """Run ``run_once(epsilon, seed)`` for every epsilon and repeat; print reports."""
    epsilons = parse_epsilons(opts.epsilon)
    for eps in epsilons:
        aucs, train_aucs, walls = [], [], []
        first = None
        for r in range(opts.repeat):
            res = run_once(eps, opts.seed + r)
            aucs.append(res["test_auc"])
            train_aucs.append(res["train_auc"])
            walls.append(res["wall_seconds"])
            if first is None:
                first = res
        report = _base_report(mode, opts, first["l"], eps)
        report["train_auc"] = float(np.mean(train_aucs))
        report["test_auc"] = float(np.mean(aucs))
        if opts.repeat > 1:
            report["test_auc_std"] = float(np.std(aucs))
        report["wall_seconds"] = float(np.mean(walls))
        report.update(first["extra"])
        report["model_sha256"] = first["model"].sha256()
        print(format_report(report))
        print()
        tag = ("eps_inf" if eps == math.inf else f"eps_{eps:g}") if len(epsilons) > 1 else ""
        _write(opts.out, tag, report, first["model"], first.get("transcript"))
    return 0


def _safe_auc(y, scores) -> float:
    try:
        return auc(y, scores)
    except FedGbdtError:
        return float("nan")


# -- subcommands ------------------------------------------------------------


def cmd_centralized(opts) -> int:
    full, _ = load_full(opts)

    def once(eps, seed):
        train, test = _train_test(opts, full, seed)
        if eps != math.inf:
            raise FedGbdtError("the centralized baseline has no privacy mechanism; use --epsilon inf")
        t0 = time.perf_counter()
        model = train_centralized(train, train_config(opts, eps, seed))
        tr = predict_batch(model, train.X, model.thresholds)
        te = predict_batch(model, test.X, model.thresholds)
        wall = time.perf_counter() - t0
        return {"l": 1, "model": model, "train_auc": _safe_auc(train.y, tr),
                "test_auc": _safe_auc(test.y, te), "wall_seconds": wall,
                "extra": {**{f"bytes_{c.name.lower()}": 0 for c in Channel}, "bytes_total": 0}}

    return _sweep(opts, "centralized", once)


def _train_test(opts, full: Dataset, seed: int):
    if opts.test_data:
        return full, load_csv(opts.test_data, full.schema)
    return split_train_test(full, seed)


def _sim_network(opts) -> SimNetwork:
    return SimNetwork(NetProfile.parse(opts.net_profile), mode=opts.net_mode, timeout=opts.timeout)


def cmd_vertical(opts) -> int:
    role, pid = parse_role(opts.role)
    if role != "simulate-all":
        return _vertical_role(opts, role, pid)
    full, _ = load_full(opts)
    l = opts.participants

    def once(eps, seed):
        train, test = _train_test(opts, full, seed)
        cfg = train_config(opts, eps, seed)
        net = _sim_network(opts)
        t0 = time.perf_counter()
        with VerticalSimulation(train, l, cfg, [train, test], net) as sim:
            model = sim.train()
            te = sim.predict(test)
            tr = sim.predict(train)
            wall = time.perf_counter() - t0
            model.thresholds = _gather_thresholds(sim)
        extra = _network_report(net)
        extra["bucket_upload_messages"] = net.stats.messages.get(Channel.BUCKET, 0)
        extra["bucket_uploads_per_passive"] = max(
            [net.stats.by_sender.get((p, Channel.BUCKET), 0) for p in range(l - 1)], default=0)
        return {"l": l, "model": model, "train_auc": _safe_auc(train.y, tr),
                "test_auc": _safe_auc(test.y, te), "wall_seconds": wall, "extra": extra,
                "transcript": _transcript(net)}

    return _sweep(opts, "vertical", once)


def _gather_thresholds(sim: VerticalSimulation) -> Dict:
    """Collect every party's thresholds; only possible when all run in one process."""
    out = dict(sim.active.own_thresholds)
    for p in sim.passives:
        out.update({key: thr for key, (_, thr) in p.thresholds.items()})
    return out


def _socket_endpoint(opts, pid: int) -> SocketEndpoint:
    if not opts.peers:
        raise FedGbdtError("distributed roles need --peers id=host:port,...")
    return SocketEndpoint(pid, parse_peers(opts.peers), timeout=opts.timeout)


def _distributed_ids(opts, role: str, pid: Optional[int]):
    peers = parse_peers(opts.peers or "")
    ids = sorted(peers)
    coordinator = ids[-1] if ids else None
    me = coordinator if role == "coordinator" else pid
    if me not in peers:
        raise FedGbdtError(f"participant {me} is not listed in --peers")
    return ids, coordinator, me


def _vertical_role(opts, role: str, pid: Optional[int]) -> int:
    eps_list = parse_epsilons(opts.epsilon)
    if len(eps_list) != 1 or opts.repeat != 1:
        raise FedGbdtError("distributed roles run one epsilon and one repetition")
    if not opts.data:
        raise FedGbdtError("distributed roles need --data with this participant's shard")
    schema = Schema.load(opts.schema) if opts.schema else None
    ids, active, me = _distributed_ids(opts, role, pid)
    cfg = train_config(opts, eps_list[0], opts.seed)
    shard = load_shard(opts.data, schema)
    test = load_shard(opts.test_data, schema) if opts.test_data else None
    ep = _socket_endpoint(opts, me)
    try:
        if me != active:
            p = PassiveParticipant(ep, shard, active, cfg, extra=[test] if test else [])
            p.handshake(ids)
            p.prepare()
            p.serve()
            log.info("participant %s done", me)
            return 0
        t0 = time.perf_counter()
        a = ActiveParticipant(ep, shard, [i for i in ids if i != me], cfg)
        a.handshake()
        a.receive_buckets()
        model = a.train()
        te = a.predict(test) if test is not None else None
        a.shutdown()
        wall = time.perf_counter() - t0
        report = _base_report("vertical", opts, len(ids), eps_list[0])
        report["test_auc"] = _safe_auc(test.y, te) if te is not None else float("nan")
        report["wall_seconds"] = wall
        report.update({k: v for k, v in ep.stats.report().items()})
        report["bucket_uploads_received"] = a.uploads_received
        report["model_sha256"] = model.sha256()
        print(format_report(report))
        _write(opts.out, "", report, model, None)
        return 0
    finally:
        ep.close()


def cmd_horizontal(opts) -> int:
    role, pid = parse_role(opts.role)
    if role != "simulate-all":
        return _horizontal_role(opts, role, pid)
    full, schema = load_full(opts)
    schema = schema or full.schema
    l = opts.participants

    def once(eps, seed):
        if eps != math.inf:
            raise FedGbdtError("horizontal training has no LDP mechanism; use --epsilon inf")
        train, test = _train_test(opts, full, seed)
        shards = partition_horizontal(train, l, seed)
        cfg = train_config(opts, eps, seed)
        net = _sim_network(opts)
        t0 = time.perf_counter()
        run = simulate_horizontal(shards, cfg, schema, agg_params(opts), exact=opts.exact,
                                  network=net, seed=seed)
        model = run.model
        te = predict_local(model, run.quantiles, test.X)
        tr = predict_local(model, run.quantiles, train.X)
        wall = time.perf_counter() - t0
        model.thresholds = _quantile_thresholds(model, run.quantiles)
        extra = _network_report(net)
        extra["aggregation"] = "exact" if opts.exact else "masked"
        extra["replicas_identical"] = len({m.sha256() for m in run.models.values()}) == 1
        return {"l": l, "model": model, "train_auc": _safe_auc(train.y, tr),
                "test_auc": _safe_auc(test.y, te), "wall_seconds": wall, "extra": extra,
                "transcript": _transcript(net)}

    return _sweep(opts, "horizontal", once)


def _quantile_thresholds(model: GbdtModel, quantiles) -> Dict:
    """Value thresholds equivalent to the bucket splits (``value < thr`` goes left)."""
    out = {}
    for t, tree in enumerate(model.trees):
        for nd in tree.iter_nodes():
            if nd.is_leaf:
                continue
            qt = quantiles[nd.feature]
            out[(t, nd.node_id)] = (qt.threshold(nd.split_bucket) if qt.kind == "continuous"
                                    else float(qt.classes[nd.split_bucket]))
    return out


def _horizontal_role(opts, role: str, pid: Optional[int]) -> int:
    if opts.repeat != 1 or parse_epsilons(opts.epsilon) != [math.inf]:
        raise FedGbdtError("distributed horizontal runs take one repetition and no epsilon")
    if not opts.data or not opts.schema:
        raise FedGbdtError("distributed roles need --data (own shard) and --schema")
    schema = Schema.load(opts.schema)
    ids, coordinator, me = _distributed_ids(opts, role, pid)
    cfg = train_config(opts, math.inf, opts.seed)
    shard = load_csv(opts.data, schema)
    test = load_csv(opts.test_data, schema) if opts.test_data else None
    ep = _socket_endpoint(opts, me)
    try:
        t0 = time.perf_counter()
        part = HorizontalParticipant(ep, shard, ids, coordinator, cfg, schema,
                                     agg_params(opts) if me == coordinator else None, opts.exact)
        model = part.run()
        wall = time.perf_counter() - t0
        report = _base_report("horizontal", opts, len(ids), math.inf)
        report["participant"] = me
        if test is not None:
            report["test_auc"] = _safe_auc(test.y, predict_local(model, part.quantiles, test.X))
        report["wall_seconds"] = wall
        report.update(ep.stats.report())
        report["model_sha256"] = model.sha256()
        model.thresholds = _quantile_thresholds(model, part.quantiles)
        print(format_report(report))
        _write(opts.out, "", report, model, None)
        return 0
    finally:
        ep.close()


def cmd_split_data(opts) -> int:
    full, schema = load_full(opts)
    schema = schema or full.schema
    out = Path(opts.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    parts = {"": full}
    if opts.test_split:
        train, test = split_train_test(full, opts.seed)
        parts = {"train_": train, "test_": test}
    for prefix, ds in parts.items():
        if opts.axis == "vertical":
            shards = partition_vertical(ds, opts.participants)
        else:
            shards = partition_horizontal(ds, opts.participants, opts.seed)
        for i, shard in enumerate(shards):
            path = out / f"{prefix or 'shard_'}{i}.csv"
            save_csv(shard, path)
            print(f"wrote {path} rows={shard.n} columns={shard.m}")
    schema.save(out / "schema.json")
    print(f"wrote {out / 'schema.json'}")
    return 0


def cmd_eval(opts) -> int:
    model = GbdtModel.from_bytes(Path(opts.model).read_bytes())
    if opts.thresholds:
        model.load_thresholds(Path(opts.thresholds).read_bytes())
    if not model.thresholds:
        raise FedGbdtError("evaluating raw feature values needs a thresholds file")
    ds, _ = load_full(opts)
    scores = predict_batch(model, ds.X, model.thresholds)
    print(format_report({"samples": ds.n, "auc": _safe_auc(ds.y, scores),
                         "model_sha256": model.sha256()}))
    return 0


# -- parser -----------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value option file; flags override it")
    p.add_argument("--data", help="CSV with header (default: bundled synthetic data)")
    p.add_argument("--test-data", help="separate test CSV instead of a seeded 2/3 split")
    p.add_argument("--schema", help="JSON schema file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")


def _add_training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epsilon", help="privacy level(s), comma separated; 'inf' disables LDP")
    p.add_argument("--buckets", type=int, help="buckets per feature (q)")
    p.add_argument("--trees", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--lambda", dest="reg_lambda", type=float)
    p.add_argument("--eta", dest="learning_rate", type=float)
    p.add_argument("--base-score", choices=["zero", "seeded_uniform"])
    p.add_argument("--repeat", type=int, help="average metrics over this many seeds")


def _add_federated(p: argparse.ArgumentParser) -> None:
    p.add_argument("--participants", type=int, help="number of participants (simulate-all)")
    p.add_argument("--role", help="simulate-all | coordinator | participant:<id>")
    p.add_argument("--peers", help="id=host:port,... for distributed roles")
    p.add_argument("--net-profile", help="lan | wan | latency_ms=..,bandwidth_kbps=..")
    p.add_argument("--net-mode", choices=["virtual", "sleep"],
                   help="account modeled delays only, or really wait")
    p.add_argument("--timeout", type=float, help="seconds to wait for any message")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedgbdt", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("centralized", help="train on pooled data")
    _add_common(p)
    _add_training(p)
    p.set_defaults(func=cmd_centralized)

    p = sub.add_parser("vertical", help="features split across participants")
    _add_common(p)
    _add_training(p)
    _add_federated(p)
    p.set_defaults(func=cmd_vertical)

    p = sub.add_parser("horizontal", help="samples split across participants")
    _add_common(p)
    _add_training(p)
    _add_federated(p)
    p.add_argument("--agg-profile", choices=["default", "test"],
                   help="2048-bit key group, or the fast 256-bit test group")
    p.add_argument("--modulus-bits", type=int, help="aggregation ring is 2**bits")
    p.add_argument("--scale-bits", type=int, help="fixed-point scale is 2**bits")
    p.add_argument("--exact", action="store_true", default=None,
                   help="unmasked exact sums (testing only; reveals contributions)")
    p.set_defaults(func=cmd_horizontal)

    p = sub.add_parser("split-data", help="write per-participant shard files")
    _add_common(p)
    p.add_argument("--axis", choices=["vertical", "horizontal"], required=True)
    p.add_argument("--participants", type=int)
    p.add_argument("--test-split", action="store_true",
                   help="split 2/3 train, 1/3 test first and shard both")
    p.set_defaults(func=cmd_split_data)

    p = sub.add_parser("eval", help="score a saved model on a CSV")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--thresholds", help="thresholds file written next to the model")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        resolve(args)
        return args.func(args)
    except (FedGbdtError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
