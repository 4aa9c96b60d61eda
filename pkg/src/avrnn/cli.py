"""Command-line entry point: ``avrnn <command> [flags]``.

Commands
--------
``gendata``    write a synthetic ``seqdata v1`` file plus provenance sidecar
``train``      run the alternating training loop; writes metrics and checkpoints
``eval``       print one metrics row for a checkpoint on a dataset
``generate``   ancestral sampling from a model checkpoint
``gradcheck``  finite-difference check of every parameter tag on a tiny model

Exit codes: 0 success, 1 I/O failure, 2 usage or config error, 3 numerical
divergence, 4 gradient check failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import Dict, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .adversarial import Critic, _stacked_loss, critic_score
from .checkpoint import CheckpointError, load_store, read_checkpoint, save_store
from .config import ConfigError, RunConfig, load_config, split_overrides
from .data import DatasetError, LgssmParams, SequenceDataset, gen_lgssm, gen_sine, load_dataset, save_dataset
from .nn import TAGS
from .training import CSV_HEADER, DivergenceError, MetricsWriter, evaluate, run_training
from .vrnn import ModelBundle, VrnnConfig, elbo, generate, latent_paths, unroll_inference

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_DIVERGED, EXIT_GRADCHECK = 0, 1, 2, 3, 4
GRADCHECK_TOL = 1e-5

MODEL_CKPT = "model.ckpt"
CRITIC_CKPT = "critic.ckpt"
METRICS_CSV = "metrics.csv"
RESOLVED_CFG = "config.cfg"


class UsageError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"avrnn: {msg}", file=sys.stderr)


# ---------------------------------------------------------------------------
# gendata


def cmd_gendata(args) -> int:
    if args.n < 1 or args.t < 1:
        raise UsageError("--n and --t must be >= 1")
    if args.family == "lgssm":
        p = LgssmParams(a=args.a, q=args.q, cobs=args.cobs, r=args.r, s0=args.s0)
        try:
            p.validate()
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        d = gen_lgssm(p, args.n, args.t, args.x_dim, args.seed)
    else:
        if args.x_dim != 1:
            raise UsageError("the sine family has x_dim 1")
        if args.noise_std < 0:
            raise UsageError("--noise-std must be >= 0")
        d = gen_sine(args.n, args.t, args.seed, args.noise_std)
    save_dataset(d, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _atomic_save(path: str, store, meta: Dict[str, str]) -> None:
    tmp = path + ".tmp"
    save_store(tmp, store, meta)
    os.replace(tmp, path)


def _load_data(path: str) -> SequenceDataset:
    if not path:
        raise UsageError("no dataset given (use --data)")
    if not os.path.isfile(path):
        raise UsageError(f"dataset not found: {path}")
    try:
        return load_dataset(path)
    except DatasetError as exc:
        raise UsageError(f"bad dataset {path}: {exc}") from None


def _resolve_config(args, overrides) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    for key, raw in overrides:
        cfg.set(key, raw)
    if getattr(args, "data", None):
        cfg.update({"data.path": args.data})
    if getattr(args, "out", None):
        cfg.update({"out.dir": args.out})
    if getattr(args, "prefetch", False):
        cfg.update({"train.prefetch": True})
    return cfg


def cmd_train(args, overrides) -> int:
    cfg = _resolve_config(args, overrides)
    cfg.require(["data.path", "out.dir"])
    data = _load_data(cfg["data.path"])
    if "model.x_dim" not in cfg.explicit:
        cfg.update({"model.x_dim": data.x_dim})
    elif cfg["model.x_dim"] != data.x_dim:
        raise ConfigError(f"model.x_dim = {cfg['model.x_dim']} but the dataset has x_dim {data.x_dim}",
                          "model.x_dim")
    tcfg = cfg.train_config()
    out = cfg["out.dir"]
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, RESOLVED_CFG), "w") as fh:
        fh.write(cfg.to_text())
    model_path = os.path.join(out, MODEL_CKPT)
    critic_path = os.path.join(out, CRITIC_CKPT)

    def checkpoint(it, model, critic):
        meta = dict(model.cfg.to_meta())
        meta["train.iteration"] = str(it)
        meta["train.seed"] = str(tcfg.seed)
        _atomic_save(model_path, model.store, meta)
        _atomic_save(critic_path, critic.store, critic.to_meta())

    writer = MetricsWriter(os.path.join(out, METRICS_CSV))
    try:
        result = run_training(tcfg, data, writer, on_eval=checkpoint)
    except DivergenceError as exc:
        _err(f"training diverged: {exc}; last good checkpoint kept in {out}")
        return EXIT_DIVERGED
    finally:
        writer.close()
    if not result.metrics or result.metrics[-1].iter != tcfg.iters:
        checkpoint(tcfg.iters, result.model, result.critic)
    return EXIT_OK


# ---------------------------------------------------------------------------
# checkpoints


def load_model(path: str) -> ModelBundle:
    """Rebuild a :class:`ModelBundle` from an ``avrnn-ckpt v1`` model file."""
    meta, _ = read_checkpoint(path)
    try:
        mcfg = VrnnConfig.from_meta(meta)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad model header: {exc}") from None
    m = ModelBundle(mcfg, seed=None)
    load_store(path, m.store)
    return m


def load_critic(path: str) -> Critic:
    meta, _ = read_checkpoint(path)
    try:
        d = Critic.from_meta(meta)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad critic header: {exc}") from None
    load_store(path, d.store)
    return d


def _open_checkpoints(model_path: str, critic_path: Optional[str]):
    for p in (model_path, critic_path):
        if p and not os.path.isfile(p):
            raise UsageError(f"checkpoint not found: {p}")
    try:
        m = load_model(model_path)
        d = load_critic(critic_path) if critic_path else None
    except CheckpointError as exc:
        raise UsageError(str(exc)) from None
    if d is not None and d.z_dim != m.cfg.z_dim:
        raise UsageError(f"critic z_dim {d.z_dim} does not match model z_dim {m.cfg.z_dim}")
    return m, d


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args, overrides) -> int:
    m, d = _open_checkpoints(args.model, args.critic)
    data = _load_data(args.data)
    if data.x_dim != m.cfg.x_dim:
        raise UsageError(f"checkpoint x_dim {m.cfg.x_dim} does not match dataset x_dim {data.x_dim}")
    if args.config or overrides:
        cfg = _resolve_config(args, overrides)
        wanted = cfg.model_config()
        if "model.x_dim" not in cfg.explicit:
            wanted.x_dim = m.cfg.x_dim
        if wanted != m.cfg:
            raise UsageError("checkpoint does not match the model section of the config")
    if data.T < 1:
        raise UsageError("dataset has no time steps")
    meta, _ = read_checkpoint(args.model)
    it = int(meta.get("train.iteration", "0"))
    rec = evaluate(m, d, data, args.batches, args.batch_size, args.seed, it)
    print(",".join(CSV_HEADER))
    print(",".join(rec.row()))
    return EXIT_OK


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    if args.t < 0 or args.n < 1:
        raise UsageError("need --t >= 0 and --n >= 1")
    m, _ = _open_checkpoints(args.model, None)
    x = generate(m, args.t, args.seed, args.n)
    prov = {"family": "generated", "checkpoint": os.path.abspath(args.model), "n": str(args.n),
            "T": str(args.t), "x_dim": str(m.cfg.x_dim), "seed": str(args.seed)}
    save_dataset(SequenceDataset(x, None, prov), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


TINY = dict(x_dim=2, z_dim=2, h_dim=4, T=3, m=2)


def gradcheck_suite(seed: int = 0, eps: float = 1e-6) -> Dict[str, float]:
    """Per-tensor finite-difference errors for ``sum(elbo) + L_dis`` on the tiny config.

    Every parameter of a tiny sequence model and a tiny critic is perturbed in
    turn, so all five tags are covered.  Returns ``{tensor name: (tag, error)}``.
    The prior-mean stop-gradient is lifted here, so the derivative being checked
    is the full one that finite differences see.
    """
    mcfg = VrnnConfig(x_dim=TINY["x_dim"], z_dim=TINY["z_dim"], h_dim=TINY["h_dim"],
                      x_enc_dim=3, z_enc_dim=3, hidden_dim=4)
    rng = np.random.default_rng(seed)
    m = ModelBundle(mcfg, seed=int(rng.integers(2 ** 31)))
    m.stop_prior_grad = False
    d = Critic(mcfg.z_dim, state=4, width=3, seed=int(rng.integers(2 ** 31)))
    T, nb, zd = TINY["T"], TINY["m"], mcfg.z_dim
    x = rng.standard_normal((nb, T, mcfg.x_dim))
    noise = rng.standard_normal((T, nb, zd))
    pn = rng.standard_normal((T, nb, zd))
    qn = rng.standard_normal((T, nb, zd))

    def loss():
        rec = unroll_inference(m, x, noise)
        return elbo(rec).sum() + _stacked_loss(critic_score(d, latent_paths(m, x, pn, qn)))

    tags = [m.store.tag_of(n) for n in m.store] + [d.store.tag_of(n) for n in d.store]
    names = m.store.names() + d.store.names()
    errs = ad.grad_check_tensors(loss, m.store.tensors() + d.store.tensors(), eps)
    return {n: (t, e) for n, t, e in zip(names, tags, errs)}


def cmd_gradcheck(args) -> int:
    if not args.tiny:
        raise UsageError("gradcheck runs on the tiny config only; pass --tiny")
    errs = gradcheck_suite(args.seed, args.eps)
    by_tag = {t: 0.0 for t in TAGS}
    for t, e in errs.values():
        by_tag[t] = max(by_tag[t], e)
    for t in TAGS:
        print(f"{t} {by_tag[t]:.3e}")
    bad = [(n, t, e) for n, (t, e) in errs.items() if not e < GRADCHECK_TOL]
    if bad:
        _err("gradient check failed for: " + ", ".join(f"{n} ({t}, {e:.3e})" for n, t, e in bad))
        return EXIT_GRADCHECK
    print("gradcheck ok")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="avrnn", description="Adversarially regularized variational RNN toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gendata", help="write a synthetic seqdata v1 file")
    g.add_argument("--family", required=True, choices=("lgssm", "sine"))
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--t", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--x-dim", type=int, default=1)
    g.add_argument("--a", type=float, default=0.9)
    g.add_argument("--q", type=float, default=0.5)
    g.add_argument("--cobs", type=float, default=1.0)
    g.add_argument("--r", type=float, default=0.5)
    g.add_argument("--s0", type=float, default=1.0)
    g.add_argument("--noise-std", type=float, default=0.1)

    t = sub.add_parser("train", help="train a model; any config key can be given as --section.key VALUE")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--prefetch", action="store_true", help="pre-generate batches on a background thread")

    e = sub.add_parser("eval", help="print one metrics row for a checkpoint")
    e.add_argument("--model", required=True)
    e.add_argument("--critic", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--config")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--batches", type=int, default=4)
    e.add_argument("--batch-size", type=int, default=32)

    s = sub.add_parser("generate", help="sample sequences from a model checkpoint")
    s.add_argument("--model", required=True)
    s.add_argument("--t", type=int, required=True)
    s.add_argument("--n", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    c = sub.add_parser("gradcheck", help="finite-difference check of all parameter tags")
    c.add_argument("--tiny", action="store_true")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--eps", type=float, default=1e-6)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        rest, overrides = split_overrides(argv)
        args = build_parser().parse_args(rest)
        if overrides and args.command not in ("train", "eval"):
            raise UsageError(f"{args.command} takes no config overrides")
        if args.command == "gendata":
            return cmd_gendata(args)
        if args.command == "train":
            return cmd_train(args, overrides)
        if args.command == "eval":
            return cmd_eval(args, overrides)
        if args.command == "generate":
            return cmd_generate(args)
        return cmd_gradcheck(args)
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return EXIT_USAGE
    except UsageError as exc:
        _err(str(exc))
        return EXIT_USAGE
    except OSError as exc:
        _err(f"I/O error: {exc}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
