"""Command-line pipeline: split, mine, build contexts, generate synthetic
corpora, pretrain, encode, train, evaluate, and ablate.

Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import csv
import json
import os
import sys

import click
import numpy as np

from . import baselines, encoder, icl, mining, molgraph, numcore, training

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

EVAL_CSV_HEADER = ["train_set", "eval_set", "readout", "mae_mev", "n_contexts"]
READOUTS = ("selection+llm", "selection+regression", "regression")


class _Ctx:
    def __init__(self, seed, config, threads, precision):
        self.seed = seed
        self.threads = threads
        self.precision = precision
        self.config = {}
        if config:
            try:
                import tomllib
            except ImportError:
                import tomli as tomllib

            with open(config, "rb") as f:
                self.config = tomllib.load(f)


def _fail(code, msg):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def _guard(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (molgraph.DatasetParseError, molgraph.ValidationError,
            numcore.CheckpointError, FileNotFoundError, KeyError) as e:
        _fail(EXIT_DATA, str(e))
    except (numcore.NumericError, training.TrainingError, np.linalg.LinAlgError) as e:
        _fail(EXIT_NUMERIC, str(e))


@click.group()
@click.option("--seed", default=0, show_default=True, help="Global RNG seed.")
@click.option("--config", default=None, type=click.Path(exists=True),
              help="TOML config with [pretrain], [icl] and [data] sections.")
@click.option("--threads", default=0, show_default=True,
              help="BLAS thread cap; 0 leaves the default, 1 is fully deterministic.")
@click.option("--precision", default="f32", type=click.Choice(["f32", "f64"]),
              show_default=True)
@click.pass_context
def main(ctx, seed, config, threads, precision):
    """In-context molecular property regression pipeline."""
    if threads > 0:
        try:
            from threadpoolctl import threadpool_limits

            threadpool_limits(limits=threads)
        except ImportError:
            os.environ["OMP_NUM_THREADS"] = str(threads)
    ctx.obj = _Ctx(seed, config, threads, precision)


@main.command("split-ood")
@click.argument("dataset", type=click.Path(exists=True))
@click.argument("out_dir", type=click.Path())
def cmd_split(dataset, out_dir):
    """Partition a dataset into base/ester/oxime JSON-lines files."""
    molecules = _guard(molgraph.parse_dataset, dataset)
    os.makedirs(out_dir, exist_ok=True)
    splits = {c: [] for c in molgraph.OodClass}
    for m in molecules:
        splits[molgraph.classify_ood(m)].append(m)
    for cls, mols in splits.items():
        molgraph.write_dataset(os.path.join(out_dir, f"{cls.value}.jsonl"), mols)
    click.echo(f"base={len(splits[molgraph.OodClass.BASE])} "
               f"ester={len(splits[molgraph.OodClass.ESTER])} "
               f"oxime={len(splits[molgraph.OodClass.OXIME])}")


@main.command("mine")
@click.argument("dataset", type=click.Path(exists=True))
@click.option("--min-support", default=10, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def cmd_mine(dataset, min_support, out_path):
    """Mine frequent constrained subgraphs from heavy-atom graphs."""
    molecules = _guard(molgraph.parse_dataset, dataset)
    graphs, ids = [], []
    for m in molecules:
        try:
            graphs.append(molgraph.heavy_graph(m))
            ids.append(m.id)
        except molgraph.EmptyGraphError:
            continue
    patterns = mining.mine_frequent(graphs, min_support, ids=ids)
    mining.write_patterns(out_path, patterns)
    click.echo(f"patterns={len(patterns)}")


@main.command("make-contexts")
@click.argument("patterns", type=click.Path(exists=True))
@click.argument("dataset", type=click.Path(exists=True))
@click.option("--k", default=10, show_default=True)
@click.option("--max-per-pattern", default=15, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.pass_obj
def cmd_make_contexts(obj, patterns, dataset, k, max_per_pattern, out_path):
    """Sample k-element context sequences per mined pattern."""
    pats = _guard(mining.read_patterns, patterns)
    molecules = _guard(molgraph.parse_dataset, dataset)
    contexts = mining.build_contexts(pats, molecules, k=k,
                                     max_per_pattern=max_per_pattern, seed=obj.seed)
    mining.write_contexts(out_path, contexts)
    click.echo(f"contexts={len(contexts)}")


@main.command("gen-synthetic")
@click.argument("out_dir", type=click.Path())
@click.option("--n-patterns", default=40, show_default=True)
@click.option("--molecules-per-pattern", default=120, show_default=True)
@click.option("--offset-scale", default=1.0, show_default=True)
@click.option("--noise", default=0.01, show_default=True)
@click.option("--k", default=10, show_default=True)
@click.option("--max-per-pattern", default=15, show_default=True)
@click.option("--n-holdout", default=None, type=int)
@click.pass_obj
def cmd_gen_synthetic(obj, out_dir, n_patterns, molecules_per_pattern,
                      offset_scale, noise, k, max_per_pattern, n_holdout):
    """Generate a context-structured synthetic corpus with latent offsets."""
    spec = mining.SyntheticTaskSpec(offset_scale=offset_scale, noise_scale=noise)
    molecules, contexts, holdout = mining.gen_synthetic(
        n_patterns, molecules_per_pattern, spec, seed=obj.seed, k=k,
        max_per_pattern=max_per_pattern, n_holdout=n_holdout)
    os.makedirs(out_dir, exist_ok=True)
    molgraph.write_dataset(os.path.join(out_dir, "dataset.jsonl"), molecules)
    mining.write_contexts(os.path.join(out_dir, "contexts.jsonl"), contexts)
    with open(os.path.join(out_dir, "holdout.json"), "w", encoding="utf-8") as f:
        json.dump({"holdout_pattern_ids": holdout}, f)
    click.echo(f"molecules={len(molecules)} contexts={len(contexts)} holdout={len(holdout)}")


def _pretrain_cfg(obj, epochs):
    sec = obj.config.get("pretrain", {})
    return training.PretrainConfig(
        lr=sec.get("lr", 1e-4),
        epochs=epochs if epochs is not None else sec.get("epochs", 100),
        batch_size=sec.get("batch_size", 64),
        warmup_steps=sec.get("warmup_steps", 100),
        ema_decay=sec.get("ema_decay", 0.999),
        seed=obj.seed, precision=obj.precision)


def _encoder_cfg(obj, n_blocks, dim):
    sec = obj.config.get("encoder", {})
    return encoder.EncoderConfig(
        n_blocks=n_blocks if n_blocks is not None else sec.get("n_blocks", 6),
        dim=dim if dim is not None else sec.get("dim", 128),
        rbf_size=sec.get("rbf_size", 16),
        local_cutoff=sec.get("local_cutoff", 3.0),
        global_cutoff=sec.get("global_cutoff", 5.0))


@main.command("pretrain-encoder")
@click.argument("dataset", type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--epochs", default=None, type=int)
@click.option("--n-blocks", default=None, type=int)
@click.option("--dim", default=None, type=int)
@click.option("--metrics", default=None, type=click.Path(), help="Per-epoch CSV log.")
@click.pass_obj
def cmd_pretrain_encoder(obj, dataset, out_path, epochs, n_blocks, dim, metrics):
    """Pretrain the encoder with the context-free summed readout (MAE)."""
    molecules = _guard(molgraph.parse_dataset, dataset)
    enc_cfg = _encoder_cfg(obj, n_blocks, dim)
    cfg = _pretrain_cfg(obj, epochs)
    logger = _metrics_logger(metrics)
    result = _guard(training.pretrain_encoder, molecules, enc_cfg, cfg, log=logger)
    encoder.save_encoder_checkpoint(out_path, result.ema_params, enc_cfg)
    click.echo(f"final_train_mae_mev={result.epoch_mae[-1] * 1000:.3f}"
               if result.epoch_mae else "no epochs run")


@main.command("encode")
@click.argument("dataset", type=click.Path(exists=True))
@click.argument("checkpoint", type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--batch-size", default=64, show_default=True)
@click.pass_obj
def cmd_encode(obj, dataset, checkpoint, out_path, batch_size):
    """Write the concatenated per-block encodings cache for a dataset."""
    molecules = _guard(molgraph.parse_dataset, dataset)
    params, enc_cfg = _guard(encoder.load_encoder_checkpoint, checkpoint, obj.precision)
    encodings = {}
    for start in range(0, len(molecules), batch_size):
        batch = molecules[start:start + batch_size]
        stack = encoder.encode_batch(batch, params, enc_cfg).data
        for m, e in zip(batch, stack):
            encodings[m.id] = e.reshape(-1).astype(np.float64)
    encoder.save_encodings(out_path, [m.id for m in molecules], encodings)
    click.echo(f"encoded={len(encodings)} dim={enc_cfg.encoding_dim}")


def _metrics_logger(path):
    if path is None:
        return None
    f = open(path, "w", encoding="utf-8", newline="")
    writer = csv.writer(f)
    writer.writerow(["epoch", "split", "mae_mev", "lr"])

    def log(epoch, split, mae_ev, lr):
        writer.writerow([epoch, split, f"{mae_ev * 1000:.6f}", lr])
        f.flush()

    return log


def _load_cache(encodings_path, dataset_path):
    encs, _ = _guard(encoder.load_encodings, encodings_path)
    molecules = _guard(molgraph.parse_dataset, dataset_path)
    labels = {m.id: m.label_u0 for m in molecules}
    return {mid: (vec, labels[mid]) for mid, vec in encs.items() if mid in labels}


@main.command("train-icl")
@click.argument("contexts", type=click.Path(exists=True))
@click.argument("encodings", type=click.Path(exists=True))
@click.argument("dataset", type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--val-contexts", default=None, type=click.Path(exists=True))
@click.option("--epochs", default=None, type=int)
@click.option("--model-dim", default=None, type=int)
@click.option("--n-layers", default=None, type=int)
@click.option("--metrics", default=None, type=click.Path())
@click.pass_obj
def cmd_train_icl(obj, contexts, encodings, dataset, out_path, val_contexts,
                  epochs, model_dim, n_layers, metrics):
    """Train the in-context sequence model on assembled contexts."""
    ctxs = _guard(mining.read_contexts, contexts)
    if not ctxs:
        _fail(EXIT_DATA, f"{contexts}: no contexts")
    cache = _load_cache(encodings, dataset)
    val = _guard(mining.read_contexts, val_contexts) if val_contexts else None
    sec = obj.config.get("icl", {})
    k = len(ctxs[0].molecule_ids)
    enc_dim = len(next(iter(cache.values()))[0])
    icl_cfg = icl.IclConfig(
        model_dim=model_dim if model_dim is not None else sec.get("model_dim", 128),
        n_layers=n_layers if n_layers is not None else sec.get("n_layers", 12),
        n_heads=sec.get("n_heads", 4),
        max_positions=2 * k, encoder_dim=enc_dim)
    cfg = training.IclTrainConfig(
        lr=sec.get("lr", 1e-3),
        epochs=epochs if epochs is not None else sec.get("epochs", 2500),
        batch_sequences=sec.get("batch_sequences", 16),
        curriculum_period=sec.get("period", 600),
        patience_epochs=sec.get("patience_epochs", 100),
        lr_floor=sec.get("lr_floor", 1e-5),
        seed=obj.seed, precision=obj.precision)
    logger = _metrics_logger(metrics)
    result = _guard(training.train_icl, ctxs, cache, icl_cfg, cfg, val, log=logger)
    icl.save_icl_checkpoint(out_path, result.params, icl_cfg, result.standardizer)
    click.echo(f"best_val_mae_mev={result.best_val_mae * 1000:.3f}")


def _llm_predictions(ctxs, cache, checkpoint, precision):
    params, cfg, standardizer = _guard(icl.load_icl_checkpoint, checkpoint, precision)
    preds = []
    for c in ctxs:
        encs = [cache[mid][0] for mid in c.molecule_ids]
        labels = [cache[mid][1] for mid in c.molecule_ids[:-1]]
        seq = icl.assemble_sequence(
            [(e, l) for e, l in zip(encs, labels)] + [(encs[-1], None)], standardizer)
        out = icl.forward_icl(seq, params, cfg)
        preds.append(float(standardizer.decode_y(out[-1])))
    return np.asarray(preds)


def _selection_from_checkpoint(checkpoint):
    tensors = _guard(numcore.load_checkpoint, checkpoint)
    return tensors["select.w"], tensors["select.b"]


def _readout_predictions(readout, ctxs, cache, checkpoint, precision):
    if readout == "selection+llm":
        if checkpoint is None:
            _fail(EXIT_USAGE, "readout selection+llm requires --checkpoint")
        return _llm_predictions(ctxs, cache, checkpoint, precision)
    if readout == "selection+regression":
        if checkpoint is None:
            _fail(EXIT_USAGE, "readout selection+regression requires --checkpoint")
        selection = _selection_from_checkpoint(checkpoint)
        reg = baselines.ContextRegressor(baselines.RegressionMode.SELECTION).fit(selection)
        return reg.predict(ctxs, cache)
    if readout == "regression":
        return baselines.ContextRegressor(baselines.RegressionMode.FULL).fit().predict(ctxs, cache)
    _fail(EXIT_USAGE, f"unknown readout {readout!r}")


def _write_report(out_path, rows, append=False):
    exists = append and os.path.exists(out_path)
    with open(out_path, "a" if append else "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        if not exists:
            writer.writerow(EVAL_CSV_HEADER)
        writer.writerows(rows)


def _print_table(rows):
    widths = [max(len(str(r[i])) for r in ([EVAL_CSV_HEADER] + rows)) for i in range(5)]
    for r in [EVAL_CSV_HEADER] + rows:
        click.echo("  ".join(str(v).ljust(w) for v, w in zip(r, widths)))


@main.command("eval")
@click.argument("contexts", type=click.Path(exists=True))
@click.argument("encodings", type=click.Path(exists=True))
@click.argument("dataset", type=click.Path(exists=True))
@click.option("--readout", type=click.Choice(READOUTS), required=True)
@click.option("--checkpoint", default=None, type=click.Path(exists=True),
              help="ICL checkpoint (required for selection-based readouts).")
@click.option("--train-set-name", default="train", show_default=True)
@click.option("--eval-set-name", default="eval", show_default=True)
@click.option("--out", "out_path", default=None, type=click.Path())
@click.option("--append/--no-append", default=False)
@click.pass_obj
def cmd_eval(obj, contexts, encodings, dataset, readout, checkpoint,
             train_set_name, eval_set_name, out_path, append):
    """Last-example MAE (meV) of one readout over a context file."""
    ctxs = _guard(mining.read_contexts, contexts)
    if not ctxs:
        _fail(EXIT_DATA, f"{contexts}: no contexts")
    cache = _load_cache(encodings, dataset)
    preds = _readout_predictions(readout, ctxs, cache, checkpoint, obj.precision)
    truth = np.asarray([cache[c.molecule_ids[-1]][1] for c in ctxs])
    mae_mev = float(np.mean(np.abs(preds - truth))) * 1000.0
    rows = [[train_set_name, eval_set_name, readout, f"{mae_mev:.4f}", len(ctxs)]]
    if out_path:
        _write_report(out_path, rows, append=append)
    _print_table(rows)


@main.command("ablate")
@click.argument("contexts", type=click.Path(exists=True))
@click.argument("encodings", type=click.Path(exists=True))
@click.argument("dataset", type=click.Path(exists=True))
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--train-set-name", default="train", show_default=True)
@click.option("--eval-set-name", default="eval", show_default=True)
@click.option("--out", "out_path", default=None, type=click.Path())
@click.option("--append/--no-append", default=False)
@click.pass_obj
def cmd_ablate(obj, contexts, encodings, dataset, checkpoint, train_set_name,
               eval_set_name, out_path, append):
    """All three readouts on one context file (ablation-table rows)."""
    ctxs = _guard(mining.read_contexts, contexts)
    if not ctxs:
        _fail(EXIT_DATA, f"{contexts}: no contexts")
    cache = _load_cache(encodings, dataset)
    truth = np.asarray([cache[c.molecule_ids[-1]][1] for c in ctxs])
    rows = []
    for readout in READOUTS:
        preds = _readout_predictions(readout, ctxs, cache, checkpoint, obj.precision)
        mae_mev = float(np.mean(np.abs(preds - truth))) * 1000.0
        rows.append([train_set_name, eval_set_name, readout, f"{mae_mev:.4f}", len(ctxs)])
    if out_path:
        _write_report(out_path, rows, append=append)
    _print_table(rows)


if __name__ == "__main__":
    main()
