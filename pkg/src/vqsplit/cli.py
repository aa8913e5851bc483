"""Command-line driver for the whole pipeline.

Stages write checkpoints that later stages consume:

    gen-data -> train-tokenizer -> pretrain -> finetune -> sweep
                                      |            |
                                linear-probe   serve-cloud / run-edge

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config, parse_config_text

_DEFAULT_K_LIST = "64,56,49,42,32,16"


class UsageError(Exception):
    """Bad flag values discovered after parsing; exits 1 like parse errors."""


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _global_flags() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--checkpoint", help="input checkpoint path")
    common.add_argument("--out", help="output path (meaning depends on command)")
    return common


def build_parser() -> _Parser:
    common = _global_flags()
    parser = _Parser(prog="vqsplit",
                     description="codebook token compression for split inference")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    sub.add_parser("gen-data", parents=[common],
                   help="write the toy dataset as npz files")
    sub.add_parser("train-tokenizer", parents=[common],
                   help="train the image tokenizer, save a checkpoint")
    sub.add_parser("pretrain", parents=[common],
                   help="masked-token pretraining on top of a tokenizer checkpoint")

    fin = sub.add_parser("finetune", parents=[common],
                         help="task finetuning with token selection")
    fin.add_argument("--mode", choices=("fixed", "variable"), default="variable")
    fin.add_argument("--k", type=int, help="token budget for fixed mode")
    fin.add_argument("--k-min", type=int, help="lower budget bound (variable mode)")
    fin.add_argument("--k-max", type=int, help="upper budget bound (variable mode)")

    sub.add_parser("linear-probe", parents=[common],
                   help="linear classification on frozen pretrained features")

    sweep = sub.add_parser("sweep", parents=[common],
                           help="rate-accuracy sweep over the split path")
    sweep.add_argument("--k-list", default=_DEFAULT_K_LIST,
                       help="comma-separated budgets, e.g. 64,32,16")
    sweep.add_argument("--count", type=int,
                       help="evaluate only the first N test samples")

    serve = sub.add_parser("serve-cloud", parents=[common],
                           help="serve the receiver role on a socket")
    serve.add_argument("--listen", default="127.0.0.1:0", help="host:port")
    serve.add_argument("--max-connections", type=int,
                       help="stop after this many connections (default: forever)")

    edge = sub.add_parser("run-edge", parents=[common],
                          help="encode one sample and classify it remotely")
    edge.add_argument("--connect", help="host:port of a serve-cloud instance")
    edge.add_argument("--k", type=int, required=True, help="token budget")
    edge.add_argument("--sample", type=int, default=0,
                      help="test-set sample index to send")

    inspect = sub.add_parser("inspect-packet", parents=[common],
                             help="print the fields of a packet file")
    inspect.add_argument("packet", help="path to a packet written by run-edge")

    http = sub.add_parser("serve-http", parents=[common],
                          help="serve the receiver role over HTTP")
    http.add_argument("--listen", default="127.0.0.1:8000", help="host:port")
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _load_run_config(args, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    if args.config:
        text = Path(args.config).read_text()
        cfg = parse_config_text(text, base=cfg)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _require_checkpoint(args) -> str:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    return args.checkpoint


def _parse_addr(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def _datasets(cfg: RunConfig):
    from .dataset import dataset_arrays, generate_toy_dataset
    train = dataset_arrays(generate_toy_dataset(cfg.data_seed, cfg.train_count))
    test = dataset_arrays(generate_toy_dataset(cfg.data_seed + 1, cfg.test_count))
    return train, test


def _load_stage(args, needed: tuple[str, ...]):
    """Load a checkpoint and rebuild the modules `needed` from it."""
    from . import cloud as cloud_mod
    from . import edge as edge_mod
    from .checkpoint import load_checkpoint, load_into

    ckpt = load_checkpoint(_require_checkpoint(args))
    cfg = _load_run_config(args, base=ckpt.config)
    out = {"ckpt": ckpt, "cfg": cfg}
    if "tokenizer" in needed or "selector" in needed:
        tokenizer, scorer = edge_mod.build_edge_models(cfg)
        if "tokenizer" in needed:
            load_into(tokenizer, ckpt.section("tokenizer"), "tokenizer")
            out["tokenizer"] = tokenizer
        if "selector" in needed:
            load_into(scorer, ckpt.section("selector"), "selector")
            out["selector"] = scorer
    if "token_encoder" in needed or "task_head" in needed:
        encoder, head = cloud_mod.build_cloud_models(cfg)
        if "token_encoder" in needed:
            load_into(encoder, ckpt.section("token_encoder"), "token_encoder")
            out["token_encoder"] = encoder
        if "task_head" in needed:
            load_into(head, ckpt.section("task_head"), "task_head")
            out["task_head"] = head
    return out


# ---------------------------------------------------------------------------
# subcommand bodies
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _load_run_config(args)
    out_dir = Path(args.out or "data")
    out_dir.mkdir(parents=True, exist_ok=True)
    from .labels import CLASS_NAMES
    (train_x, train_y), (test_x, test_y) = _datasets(cfg)
    np.savez_compressed(out_dir / "train.npz", images=train_x, labels=train_y)
    np.savez_compressed(out_dir / "test.npz", images=test_x, labels=test_y)
    (out_dir / "classes.txt").write_text(
        "".join(f"{i} {name}\n" for i, name in enumerate(CLASS_NAMES)))
    print(f"wrote {len(train_x)} train / {len(test_x)} test samples to {out_dir}")
    return 0


def cmd_train_tokenizer(args) -> int:
    from . import training
    from .checkpoint import save_checkpoint
    from .evaluation import recon_mse

    cfg = _load_run_config(args)
    (train_x, _), _ = _datasets(cfg)
    tokenizer, history = training.train_tokenizer(cfg, train_x, printer=_step_printer())
    mse = recon_mse(tokenizer, train_x[:512])
    out = args.out or "tokenizer.ckpt"
    save_checkpoint(out, {"tokenizer": tokenizer}, cfg, seed=cfg.seed)
    print(f"final recon mse {mse:.6f} over {len(history)} steps")
    print(f"saved {out}")
    return 0


def cmd_pretrain(args) -> int:
    from . import training
    from .checkpoint import save_checkpoint

    stage = _load_stage(args, ("tokenizer",))
    cfg = stage["cfg"]
    (train_x, train_y), _ = _datasets(cfg)
    result = training.pretrain(cfg, stage["tokenizer"], train_x, train_y,
                               printer=_step_printer())
    out = args.out or "pretrained.ckpt"
    save_checkpoint(out, {
        "tokenizer": stage["tokenizer"],
        "token_encoder": result.encoder,
        "recon_decoder": result.decoder,
        "projection": result.projection,
    }, cfg, seed=cfg.seed)
    last = result.history[-1]
    print(f"final rec {last['rec']:.6f} dist {last['dist']:.6f} "
          f"contra {last['contra']:.6f} total {last['total']:.6f}")
    print(f"saved {out}")
    return 0


def cmd_finetune(args) -> int:
    from . import training
    from .checkpoint import save_checkpoint
    from .evaluation import accuracy_at_k

    stage = _load_stage(args, ("tokenizer", "token_encoder"))
    cfg = stage["cfg"]
    overrides = {}
    if args.k_min is not None:
        overrides["k_min"] = args.k_min
    if args.k_max is not None:
        overrides["k_max"] = args.k_max
    if overrides:
        cfg = cfg.replace(**overrides)
    (train_x, train_y), (test_x, test_y) = _datasets(cfg)
    result = training.finetune(cfg, stage["tokenizer"], stage["token_encoder"],
                               train_x, train_y, mode=args.mode, k=args.k,
                               printer=_step_printer())
    out = args.out or "finetuned.ckpt"
    sections = {
        "tokenizer": stage["tokenizer"],
        "token_encoder": result.encoder,
        "selector": result.scorer,
        "task_head": result.head,
    }
    # carry pretraining-only sections through when present
    for name in ("recon_decoder", "projection"):
        if name in stage["ckpt"].sections:
            sections[name] = stage["ckpt"].sections[name]
    save_checkpoint(out, sections, cfg, seed=cfg.seed)
    eval_k = args.k or cfg.k_max
    top1 = accuracy_at_k(cfg, stage["tokenizer"], result.scorer, result.encoder,
                         result.head, test_x, test_y, k=eval_k)
    print(f"test top1 at K={eval_k}: {top1:.4f} over {len(test_x)} samples")
    print(f"saved {out}")
    return 0


def cmd_linear_probe(args) -> int:
    from . import training

    stage = _load_stage(args, ("tokenizer", "token_encoder"))
    cfg = stage["cfg"]
    (train_x, train_y), (test_x, test_y) = _datasets(cfg)
    top1, _ = training.linear_probe(cfg, stage["tokenizer"],
                                    stage["token_encoder"],
                                    train_x, train_y, test_x, test_y,
                                    printer=_step_printer())
    print(f"linear-probe top1 {top1:.4f} over {len(test_x)} samples")
    if args.out:
        Path(args.out).write_text(f"top1 {top1:.6f}\n")
    return 0


def cmd_sweep(args) -> int:
    from . import cloud as cloud_mod
    from . import edge as edge_mod
    from .evaluation import rate_accuracy_sweep, write_sweep_csv

    stage = _load_stage(args, ("tokenizer", "selector", "token_encoder",
                               "task_head"))
    cfg = stage["cfg"]
    try:
        k_list = [int(part) for part in args.k_list.split(",") if part.strip()]
    except ValueError:
        raise UsageError(f"bad --k-list {args.k_list!r}") from None
    if not k_list or any(not 1 <= k <= cfg.total_tokens for k in k_list):
        raise UsageError(f"--k-list values must lie in [1, {cfg.total_tokens}]")
    _, (test_x, test_y) = _datasets(cfg)
    if args.count:
        test_x, test_y = test_x[:args.count], test_y[:args.count]
    edge_rt = edge_mod.EdgeRuntime(config=cfg, tokenizer=stage["tokenizer"],
                                   scorer=stage["selector"])
    cloud_rt = cloud_mod.CloudRuntime(config=cfg, encoder=stage["token_encoder"],
                                      head=stage["task_head"])
    records = rate_accuracy_sweep(edge_rt, cloud_rt, test_x, test_y, k_list,
                                  printer=print)
    out = args.out or "sweep.csv"
    write_sweep_csv(records, out)
    print(f"saved {out}")
    return 0


def cmd_serve_cloud(args) -> int:
    from .cloud import CloudServer, load_cloud_runtime

    runtime = load_cloud_runtime(_require_checkpoint(args))
    host, port = _parse_addr(args.listen)
    server = CloudServer(runtime, host, port)
    bound_host, bound_port = server.address
    n_params = runtime.encoder.num_values() + runtime.head.num_values()
    print(f"cloud role parameters: {n_params}", flush=True)
    print(f"listening on {bound_host}:{bound_port}", flush=True)
    try:
        server.serve_connections(max_connections=args.max_connections)
    except KeyboardInterrupt:
        pass
    finally:
        server.close()
    return 0


def cmd_run_edge(args) -> int:
    from .channel import connect
    from .edge import load_edge_runtime, request_classification, run_edge
    from .labels import CLASS_NAMES

    if not args.connect and not args.out:
        raise UsageError("run-edge needs --connect and/or --out")
    runtime = load_edge_runtime(_require_checkpoint(args))
    cfg = runtime.config
    if not 1 <= args.k <= cfg.total_tokens:
        raise UsageError(f"--k must lie in [1, {cfg.total_tokens}]")
    _, (test_x, test_y) = _datasets(cfg)
    if not 0 <= args.sample < len(test_x):
        raise UsageError(f"--sample must lie in [0, {len(test_x)})")
    image = test_x[args.sample]
    truth = CLASS_NAMES[test_y[args.sample]]
    # deployed edge role: conv encoder + codebook + scorer (pixel decoder
    # is a training-only artifact)
    n_params = sum(t.data.size for name, t in runtime.tokenizer.params().items()
                   if ".dec." not in name)
    n_params += runtime.scorer.num_values()
    print(f"edge role parameters: {n_params}")
    packet = run_edge(runtime, image, args.k)
    print(f"sample {args.sample} true class {truth!r} "
          f"packet {len(packet)} bytes k {args.k}")
    if args.out:
        Path(args.out).write_bytes(packet)
        print(f"saved {args.out}")
    if args.connect:
        host, port = _parse_addr(args.connect)
        chan = connect(host, port)
        try:
            reply = request_classification(chan, packet)
        finally:
            try:
                chan.send(b"")
            except Exception:
                pass
            chan.close()
        marker = "correct" if reply.label_name == truth else "wrong"
        print(f"predicted {reply.label_name!r} (label {reply.label}) [{marker}]")
    return 0


def cmd_inspect_packet(args) -> int:
    from .cloud import describe_packet

    info = describe_packet(Path(args.packet).read_bytes())
    print(f"h: {info['h']}")
    print(f"w: {info['w']}")
    print(f"N: {info['n_codes']}")
    print(f"K: {info['k']}")
    print(f"bits_per_index: {info['bits_per_index']}")
    print(f"positions: {' '.join(str(p) for p in info['kept_positions'])}")
    print(f"indices: {' '.join(str(i) for i in info['indices'])}")
    return 0


def cmd_serve_http(args) -> int:
    import uvicorn

    from .cloud import load_cloud_runtime
    from .service import create_app

    runtime = load_cloud_runtime(_require_checkpoint(args))
    host, port = _parse_addr(args.listen)
    app = create_app(runtime)
    print(f"serving http on {host}:{port}", flush=True)
    uvicorn.run(app, host=host, port=port, log_level="warning")
    return 0


def _step_printer():
    def printer(line: str) -> None:
        print(line, flush=True)
    return printer


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-tokenizer": cmd_train_tokenizer,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "linear-probe": cmd_linear_probe,
    "sweep": cmd_sweep,
    "serve-cloud": cmd_serve_cloud,
    "run-edge": cmd_run_edge,
    "inspect-packet": cmd_inspect_packet,
    "serve-http": cmd_serve_http,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not args.command:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"vqsplit: error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"vqsplit: config error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 2
    except Exception as exc:  # noqa: BLE001 - uniform runtime exit code
        print(f"vqsplit: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
