"""``tqsim`` command line: diagnostics, PEG planning, range estimation and simulation.

Exit codes: 0 success, 2 input-format error, 3 configuration error.
"""

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import diagnostics, io
from .diagnostics import DiagnosticsError
from .estimators import KINDS, EstimatorError, RangeEstimator
from .peg import GroupSpec, GroupSpecError, build_range_permutation
from .quant import PerEmbedding, PerEmbeddingGroup, PerTensor, QuantError, fake_quantize, quantize

EXIT_OK, EXIT_INPUT, EXIT_CONFIG = 0, 2, 3
log = logging.getLogger("tqsim")


class InputFormatError(ValueError):
    pass


def _fmt(x):
    return repr(float(x))


def _write_csv(path, header_comments, columns, rows):
    fh = sys.stdout if path in (None, "-") else open(path, "w", newline="")
    try:
        for line in header_comments:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        w.writerows(rows)
    finally:
        if fh is not sys.stdout:
            fh.close()


def _read_rank3(path):
    tf = io.read_tensor(path)
    if tf.data.ndim != 3:
        raise InputFormatError(f"{path}: expected a rank-3 tensor, got shape {tf.data.shape}")
    return tf


def _read_tokens(path):
    data = io.read_tensor(path).data
    if data.ndim == 1:
        data = data[None, :]
    if data.ndim != 2 or np.any(data != np.round(data)) or np.any(data < 0):
        raise InputFormatError(f"{path}: token file must hold non-negative integers of shape (B, T)")
    return data.astype(np.int64)


def _read_json(path):
    with open(path) as fh:
        return fh.read()


# -- subcommands ---------------------------------------------------------------

def cmd_outliers(args):
    tf = _read_rank3(args.input)
    rep = diagnostics.find_outliers(tf.data, args.sigma, pooled=args.pooled)
    head = [f"sigma={args.sigma:g} stats={'pooled' if args.pooled else 'per-sequence'} "
            f"crc={'present' if tf.has_crc else 'absent'} shape={'x'.join(map(str, tf.data.shape))} "
            f"flagged={len(rep.cells)}"]
    _write_csv(args.out, head, ["seq", "token", "dim"], rep.cells.tolist())
    summary = args.summary
    if summary is None and args.out not in (None, "-"):
        root, ext = os.path.splitext(args.out)
        summary = f"{root}_dims{ext or '.csv'}"
    if summary:
        rows = [(j, int(rep.dim_hits[j]), int(rep.dim_seqs[j])) for j in range(len(rep.dim_hits))
                if rep.dim_hits[j] or args.all_dims]
        _write_csv(summary, head, ["dim", "hits", "sequences"], rows)
    print(f"flagged {len(rep.cells)} of {rep.num_cells} cells; dims {rep.flagged_dims.tolist()}")
    return EXIT_OK


def cmd_token_ranges(args):
    tf = _read_rank3(args.input)
    seq, tok, lo, hi = diagnostics.token_ranges(tf.data)
    rows = [(int(a), int(b), _fmt(c), _fmt(d)) for a, b, c, d in zip(seq, tok, lo, hi)]
    _write_csv(args.out, [f"crc={'present' if tf.has_crc else 'absent'}"],
               ["seq", "token", "min", "max"], rows)
    return EXIT_OK


def cmd_peg_plan(args):
    data = io.read_tensor(args.input).data.astype(np.float64)
    if data.ndim < 1:
        raise InputFormatError("calibration tensor needs a last (embedding) dimension")
    calib = data.reshape(1, -1, data.shape[-1])
    d = calib.shape[-1]
    if args.k < 1 or d % args.k:
        raise GroupSpecError(f"K={args.k} does not divide d={d}")
    if args.no_permute:
        lo, hi = calib.reshape(-1, d).min(axis=0), calib.reshape(-1, d).max(axis=0)
        spec = GroupSpec(d, args.k, None, hi - lo)
    else:
        spec = build_range_permutation(calib, args.k)
    text = io.group_spec_to_json(spec)
    if args.out in (None, "-"):
        print(text)
    else:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    return EXIT_OK


def _granularity(args, d):
    if args.granularity == "tensor":
        return PerTensor()
    if args.granularity == "embedding":
        return PerEmbedding(d)
    if not args.plan:
        raise GroupSpecError("--granularity peg needs --plan")
    spec = io.group_spec_from_json(_read_json(args.plan))
    if spec.d != d:
        raise GroupSpecError(f"plan has d={spec.d}, tensor has d={d}")
    return PerEmbeddingGroup(spec)


def cmd_estimate_ranges(args):
    data = io.read_tensor(args.input).data.astype(np.float64)
    if data.ndim < 2:
        raise InputFormatError("input must have a leading batch axis and an embedding axis")
    est = RangeEstimator(args.estimator, _granularity(args, data.shape[-1]), momentum=args.momentum,
                         grid_points=args.grid_points)
    for batch in data:
        est.observe(batch)
    p = est.finalize(args.bits, args.symmetric)
    text = json.dumps({"version": 1, "estimator": args.estimator, "params": p.to_dict()},
                      indent=2, sort_keys=True)
    if args.out in (None, "-"):
        print(text)
    else:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    return EXIT_OK


def cmd_quantize(args):
    data = io.read_tensor(args.input).data.astype(np.float64)
    obj = json.loads(_read_json(args.params))
    if obj.get("version") != 1 or "params" not in obj:
        raise QuantError("params file must be the output of estimate-ranges (version 1)")
    p = io.qparams_from_dict(obj["params"])
    if args.integers:
        out = quantize(data, p).int_data.astype(np.float32)
    else:
        out = fake_quantize(data, p)
    io.write_tensor(args.out, out, crc=not args.no_crc)
    deq = fake_quantize(data, p)
    print(f"mse={_fmt(np.mean((data - deq) ** 2))} sqnr_db={_fmt(diagnostics.sqnr_db(data, deq))}")
    return EXIT_OK


def _load_sim_inputs(args):
    from .encoder.qconfig import QuantConfig

    model = io.load_model(args.model)
    qconfig = QuantConfig.from_json(_read_json(args.qconfig))
    tokens = _read_tokens(args.tokens)
    calib = _read_tokens(args.calib) if args.calib else tokens
    labels = None
    if args.labels:
        labels = io.read_tensor(args.labels).data.reshape(-1).astype(np.int64)
        if len(labels) != len(tokens):
            raise InputFormatError(f"{len(labels)} labels for {len(tokens)} sequences")
    return model, qconfig, tokens, calib, labels


def _metric_fn(model, tokens, calib, labels, batch_size):
    from .encoder.sim import calibrate, predict_logits

    batches = [calib[i:i + batch_size] for i in range(0, len(calib), batch_size)]
    reference = labels if labels is not None else predict_logits(model, tokens).argmax(axis=-1)

    def evaluate(qconfig):
        state = calibrate(model, qconfig, batches)
        pred = predict_logits(model, tokens, state).argmax(axis=-1)
        return float(np.mean(pred == reference))

    return evaluate


def cmd_simulate(args):
    from .encoder.sim import calibrate, forward_quantized

    model, qconfig, tokens, calib, labels = _load_sim_inputs(args)
    batches = [calib[i:i + args.batch_size] for i in range(0, len(calib), args.batch_size)]
    state = calibrate(model, qconfig, batches)
    res = forward_quantized(model, tokens, state, record=True)
    rows = []
    for name, x in res.sites.items():
        if not qconfig.enabled(name):
            continue
        xq = res.quantized_sites[name]
        rows.append((name, qconfig.settings(name).bits, _fmt(np.mean((xq - x) ** 2)),
                     _fmt(diagnostics.sqnr_db(x, xq))))
    reference = labels if labels is not None else model.forward(tokens).logits.argmax(axis=-1)
    metric = float(np.mean(res.logits.argmax(axis=-1) == reference))
    kind = "accuracy" if labels is not None else "fp32_agreement"
    _write_csv(args.out, [f"{kind}={_fmt(metric)}"], ["site", "bits", "mse", "sqnr_db"], rows)
    if args.dump_sites:
        os.makedirs(args.dump_sites, exist_ok=True)
        for name, x in res.sites.items():
            io.write_tensor(os.path.join(args.dump_sites, f"{name}.qtn"), x)
    if args.out not in (None, "-"):
        print(f"{kind}={metric:.6f}")
    return EXIT_OK


def cmd_ablate(args):
    from .encoder.qconfig import ABLATION_GROUPS, leave_one_out_ablation

    model, qconfig, tokens, calib, labels = _load_sim_inputs(args)
    evaluate = _metric_fn(model, tokens, calib, labels, args.batch_size)
    groups = list(ABLATION_GROUPS) if args.groups is None else args.groups
    rows = leave_one_out_ablation(qconfig, groups, evaluate, model.config)
    _write_csv(args.out, [], ["excluded_group", "score"], [(g, _fmt(s)) for g, s in rows])
    return EXIT_OK


def cmd_make_model(args):
    from .encoder import Encoder, EncoderConfig, inject_outlier_model, train_task_model

    cfg = EncoderConfig(args.layers, args.d, args.heads, args.d_ff, args.max_len, args.vocab)
    if args.train_steps:
        model, losses = train_task_model(cfg, steps=args.train_steps, seed=args.seed)
        print(f"final training loss {np.mean(losses[-10:]):.6f}")
    else:
        model = Encoder.init(cfg, seed=args.seed)
    if args.plant_dims:
        dims = [int(v) for v in args.plant_dims.split(",")]
        model = inject_outlier_model(model, dims, args.magnitude, layer=args.plant_layer, seed=args.seed)
    io.save_model(args.out, model)
    return EXIT_OK


def cmd_synth_data(args):
    from .encoder.synthetic import make_cooccurrence_task

    tokens, labels = make_cooccurrence_task(args.n, args.seq_len, args.vocab, seed=args.seed,
                                            min_len=args.min_len)
    io.write_tensor(args.tokens_out, tokens.astype(np.float32))
    if args.labels_out:
        io.write_tensor(args.labels_out, labels.astype(np.float32))
    return EXIT_OK


def cmd_dump_sites(args):
    model = io.load_model(args.model)
    tokens = _read_tokens(args.tokens)
    res = model.forward(tokens, record=True)
    os.makedirs(args.out_dir, exist_ok=True)
    for name in args.sites or res.sites:
        if name not in res.sites:
            raise InputFormatError(f"unknown site {name!r}")
        io.write_tensor(os.path.join(args.out_dir, f"{name}.qtn"), res.sites[name])
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="tqsim", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("outliers", help="flag cells beyond k standard deviations")
    s.add_argument("input")
    s.add_argument("--sigma", type=float, default=6.0)
    s.add_argument("--pooled", action="store_true", help="statistics over all sequences at once")
    s.add_argument("--out", default="-")
    s.add_argument("--summary", help="per-dim hit counts CSV (default: <out>_dims.csv)")
    s.add_argument("--all-dims", action="store_true", help="include dims with zero hits in the summary")
    s.set_defaults(fn=cmd_outliers)

    s = sub.add_parser("token-ranges", help="per-token min/max over the embedding dim")
    s.add_argument("input")
    s.add_argument("--out", default="-")
    s.set_defaults(fn=cmd_token_ranges)

    s = sub.add_parser("peg-plan", help="range-based permutation and K groups")
    s.add_argument("input")
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--no-permute", action="store_true")
    s.add_argument("--out", default="-")
    s.set_defaults(fn=cmd_peg_plan)

    s = sub.add_parser("estimate-ranges", help="quantization params from a (batch, ..., d) tensor")
    s.add_argument("input")
    s.add_argument("--estimator", choices=KINDS, default="current_minmax")
    s.add_argument("--bits", type=int, default=8)
    s.add_argument("--symmetric", action="store_true")
    s.add_argument("--granularity", choices=("tensor", "embedding", "peg"), default="tensor")
    s.add_argument("--plan", help="group spec JSON for --granularity peg")
    s.add_argument("--momentum", type=float, default=0.9)
    s.add_argument("--grid-points", type=int, default=100)
    s.add_argument("--out", default="-")
    s.set_defaults(fn=cmd_estimate_ranges)

    s = sub.add_parser("quantize", help="fake-quantize a tensor with estimated params")
    s.add_argument("input")
    s.add_argument("--params", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--integers", action="store_true", help="write grid integers instead of values")
    s.add_argument("--no-crc", action="store_true")
    s.set_defaults(fn=cmd_quantize)

    for name, fn, help_ in (("simulate", cmd_simulate, "quantized forward with per-site errors"),
                            ("ablate", cmd_ablate, "leave-one-out activation quantizer ablation")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--model", required=True)
        s.add_argument("--qconfig", required=True)
        s.add_argument("--tokens", required=True)
        s.add_argument("--labels")
        s.add_argument("--calib", help="calibration tokens (default: --tokens)")
        s.add_argument("--batch-size", type=int, default=128)
        s.add_argument("--out", default="-")
        if name == "simulate":
            s.add_argument("--dump-sites", metavar="DIR")
        else:
            s.add_argument("--groups", nargs="*")
        s.set_defaults(fn=fn)

    s = sub.add_parser("make-model", help="random or trained toy encoder, optionally with outliers")
    s.add_argument("--out", required=True)
    s.add_argument("--layers", type=int, default=4)
    s.add_argument("--d", type=int, default=64)
    s.add_argument("--heads", type=int, default=4)
    s.add_argument("--d-ff", type=int, default=256)
    s.add_argument("--max-len", type=int, default=32)
    s.add_argument("--vocab", type=int, default=1000)
    s.add_argument("--train-steps", type=int, default=0)
    s.add_argument("--plant-dims", help="comma-separated outlier dims")
    s.add_argument("--magnitude", type=float, default=60.0)
    s.add_argument("--plant-layer", type=int, default=-1)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_make_model)

    s = sub.add_parser("synth-data", help="co-occurrence task tokens and labels")
    s.add_argument("--n", type=int, default=256)
    s.add_argument("--seq-len", type=int, default=32)
    s.add_argument("--vocab", type=int, default=1000)
    s.add_argument("--min-len", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tokens-out", required=True)
    s.add_argument("--labels-out")
    s.set_defaults(fn=cmd_synth_data)

    s = sub.add_parser("dump-sites", help="FP32 site tensors as tensor files")
    s.add_argument("--model", required=True)
    s.add_argument("--tokens", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--sites", nargs="*")
    s.set_defaults(fn=cmd_dump_sites)
    return p


def main(argv=None):
    from .encoder.model import EncoderError
    from .encoder.qconfig import ConfigError
    from .encoder.sim import NotCalibratedError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (io.TensorFileError, InputFormatError, DiagnosticsError, EncoderError,
            json.JSONDecodeError, OSError, UnicodeDecodeError) as exc:
        print(f"tqsim: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ConfigError, GroupSpecError, QuantError, EstimatorError, NotCalibratedError) as exc:
        print(f"tqsim: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
