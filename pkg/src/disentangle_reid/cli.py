"""Command-line entry point: ``disentangle-reid {synth,describe,train,eval,probe,report}``."""

from __future__ import annotations

import hashlib
import json
import logging
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np

from . import __version__
from ._validation import ValidationError
from .data import SPLITS, SynthConfig, generate_dataset, load_dataset, load_manifest, save_dataset
from .model import ModelConfig
from .engine import TrainConfig, extract_features, fit, load_checkpoint, load_config_file
from .evalkit import (
    build_protocol_mask,
    cluster_report,
    cluster_svg,
    cmc_map,
    linear_probe,
    pairwise_distances,
    retrieval_report,
    write_retrieval_report,
)
from .semantics import (
    ClientConfig,
    DescriptionCache,
    HashTextEncoder,
    PromptCatalog,
    describe_dataset,
    make_client,
    text_features_from_descriptions,
)

log = logging.getLogger("disentangle_reid")

EXIT_RUNTIME = 1
EXIT_VALIDATION = 2


def git_blob_id(path: Path) -> str:
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _artifact_ids(paths):
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            for f in sorted(p.iterdir()):
                if f.is_file() and not f.name.startswith("run_"):
                    out[str(f)] = git_blob_id(f)
        elif p.is_file():
            out[str(p)] = git_blob_id(p)
    return out


class Run:
    """Collects what one command read and wrote, then writes ``run_<command>.json``."""

    def __init__(self, command: str, out: Path, config: dict, seed):
        self.command = command
        self.out = out
        self.config = config
        self.seed = seed
        self.inputs = []
        self.outputs = []
        self.started = datetime.now(timezone.utc).isoformat()

    def finish(self, **extra) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        blob = json.dumps(self.config, sort_keys=True, default=str).encode()
        manifest = {
            "command": self.command,
            "version": __version__,
            "config": self.config,
            "config_hash": hashlib.sha256(blob).hexdigest(),
            "seed": self.seed,
            "inputs": _artifact_ids(self.inputs),
            "outputs": _artifact_ids(self.outputs),
            "started": self.started,
            "finished": datetime.now(timezone.utc).isoformat(),
            **extra,
        }
        (self.out / f"run_{self.command}.json").write_text(json.dumps(manifest, indent=2, default=str))


def _section(ctx, name: str) -> dict:
    """Config mapping for one command; a file may hold per-command sections."""
    path = ctx.obj["config"]
    if path is None:
        return {}
    data = load_config_file(path)
    if any(k in data for k in ("synth", "train", "client")):
        return dict(data.get(name, {}))
    return data


def _emit(payload) -> None:
    click.echo(json.dumps(payload, indent=2, sort_keys=True))


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__)
@click.option("--config", "config", type=click.Path(exists=True, dir_okay=False), default=None,
              help="JSON/YAML config; may contain 'synth', 'train' and 'client' sections.")
@click.option("--seed", type=int, default=None, help="Overrides the seed from the config.")
@click.option("--out", "out", type=click.Path(file_okay=False), default="runs/out", show_default=True,
              help="Output directory.")
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
@click.pass_context
def cli(ctx, config, seed, out, verbose):
    """Disentangled clothes-changing re-ID: data, descriptions, training, evaluation."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")
    ctx.obj = {"config": config, "seed": seed, "out": Path(out)}


@cli.command()
@click.option("--num-ids", type=int, default=None, help="Number of identities.")
@click.option("--noise-sigma", type=float, default=None, help="Std of additive Gaussian noise.")
@click.pass_context
def synth(ctx, num_ids, noise_sigma):
    """Generate a synthetic factor dataset into OUT."""
    cfg = _section(ctx, "synth")
    if ctx.obj["seed"] is not None:
        cfg["seed"] = ctx.obj["seed"]
    if num_ids is not None:
        cfg["num_ids"] = num_ids
    if noise_sigma is not None:
        cfg["noise_sigma"] = noise_sigma
    unknown = set(cfg) - set(SynthConfig.__dataclass_fields__)
    if unknown:
        raise ValidationError(f"unknown synth config keys: {sorted(unknown)}")
    scfg = SynthConfig(**cfg)
    out = ctx.obj["out"]
    run = Run("synth", out, asdict(scfg), scfg.seed)
    ds = generate_dataset(scfg)
    save_dataset(out, ds)
    (out / "synth_config.json").write_text(json.dumps(asdict(scfg), indent=2))
    run.outputs.append(out)
    run.finish()
    _emit({"dataset": str(out), "num_images": len(ds.data), **{s: int((ds.split == s).sum()) for s in SPLITS}})


def _manifest_items(dataset, manifest, splits):
    if manifest is not None:
        recs = load_manifest(manifest)
        return [(r.image_id, r.path, r.pid, r.clothid) for r in recs], {r.image_id: r for r in recs}
    items, rows = [], {}
    for s in splits:
        for r in load_manifest(Path(dataset) / f"{s}.csv"):
            items.append((r.image_id, r.path, r.pid, r.clothid))
            rows[r.image_id] = r
    return items, rows


def _synthetic_annotator(rows_by_ref):
    templates = {
        "biometric": "Person {pid} has a consistent build and height.",
        "hair": "Hairstyle variant {clothid}.",
        "clothing": "Wearing outfit {clothid}.",
        "pose": "Pose in frame {image_id}.",
        "background": "Scene from camera {camid}.",
    }

    def annotate(image_ref, aspect):
        r = rows_by_ref.get(image_ref)
        if r is None:
            return None
        return templates[aspect].format(pid=r.pid, clothid=r.clothid, camid=r.camid, image_id=r.image_id)

    return annotate


@cli.command()
@click.option("--dataset", type=click.Path(exists=True, file_okay=False), default=None,
              help="Dataset directory with train/query/gallery manifests.")
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Single manifest CSV (instead of --dataset).")
@click.option("--split", "splits", multiple=True, type=click.Choice(SPLITS), default=("train",),
              show_default=True, help="Dataset splits to describe.")
@click.option("--aspect", "aspects", multiple=True,
              type=click.Choice(["hair", "clothing", "pose", "background"]),
              help="Non-biometric aspects to describe (default: the train config factors).")
@click.option("--client-config", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Client config (endpoint, model, token_env, max_retries, timeout, mock, max_in_flight).")
@click.option("--cache", "cache_path", type=click.Path(dir_okay=False), default=None,
              help="Description cache file (default OUT/descriptions.jsonl).")
@click.option("--clothing-summaries", is_flag=True, help="Also summarise clothing per outfit.")
@click.pass_context
def describe(ctx, dataset, manifest, splits, aspects, client_config, cache_path, clothing_summaries):
    """Generate (or reuse cached) per-image descriptions and identity summaries."""
    if (dataset is None) == (manifest is None):
        raise ValidationError("give exactly one of --dataset or --manifest")
    ccfg_dict = _section(ctx, "client")
    if client_config:
        ccfg_dict.update(load_config_file(client_config))
    ccfg = ClientConfig.from_dict(ccfg_dict)
    if not aspects:
        aspects = tuple(TrainConfig.from_dict(_section(ctx, "train")).factors)
    out = ctx.obj["out"]
    cache_path = Path(cache_path) if cache_path else out / "descriptions.jsonl"
    items, rows = _manifest_items(dataset, manifest, splits)
    catalog = PromptCatalog()
    annotator = _synthetic_annotator({r.path: r for r in rows.values()}) if ccfg.mock else None
    client = make_client(ccfg, catalog, annotator)
    cache = DescriptionCache(cache_path)
    before = len(cache)
    run = Run("describe", out, {"client": asdict(ccfg), "aspects": list(aspects), "splits": list(splits)},
              ctx.obj["seed"])
    run.inputs += [dataset or manifest]
    descs = describe_dataset(items, aspects, client, cache, catalog, ccfg.max_in_flight, clothing_summaries)
    run.outputs.append(cache_path)
    stats = {"images": len(descs), "client_calls": client.calls, "new_records": len(cache) - before,
             "cache_records": len(cache), "cache": str(cache_path)}
    run.finish(stats=stats)
    _emit(stats)


class _CacheOnlyClient:
    """Refuses to call out: training must only read descriptions already cached."""

    def __init__(self, cache):
        self.cache = cache
        self.calls = 0
        models = {r["model"] for r in cache.records()}
        if len(models) != 1:
            raise ValidationError(f"description cache must hold exactly one model's output, found {sorted(models)}")
        self.model = models.pop()

    def complete(self, messages):
        raise ValidationError("description missing from cache; run `describe` first")


def _manifest_paths(dataset_dir) -> dict:
    return {r.image_id: r.path for s in SPLITS for r in load_manifest(Path(dataset_dir) / f"{s}.csv")}


@cli.command()
@click.option("--dataset", type=click.Path(exists=True, file_okay=False), required=True,
              help="Dataset directory written by `synth`.")
@click.option("--baseline", is_flag=True, help="Identity loss only (no biometric/non-biometric terms).")
@click.option("--resume", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Continue from a checkpoint written with the same config.")
@click.option("--descriptions", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Train on embedded cached descriptions instead of the synthetic oracle text features.")
@click.option("--epochs", type=int, default=None, help="Overrides epochs.")
@click.option("--base-lr", type=float, default=None, help="Overrides base_lr.")
@click.pass_context
def train(ctx, dataset, baseline, resume, descriptions, epochs, base_lr):
    """Train a model; writes checkpoints and metrics.csv into OUT."""
    cfg_dict = _section(ctx, "train")
    if ctx.obj["seed"] is not None:
        cfg_dict["seed"] = ctx.obj["seed"]
    if baseline:
        # expressed through the weights so the run manifest differs only there
        cfg_dict.update(lambda_b=0.0, lambda_n=0.0)
    if epochs is not None:
        cfg_dict["epochs"] = epochs
    if base_lr is not None:
        cfg_dict["base_lr"] = base_lr
    cfg = TrainConfig.from_dict(cfg_dict)
    ds = load_dataset(dataset)
    tr, q, g = ds.part("train"), ds.part("query"), ds.part("gallery")
    if descriptions is not None:
        paths = _manifest_paths(dataset)
        cache = DescriptionCache(descriptions)
        client = _CacheOnlyClient(cache)
        items = [(iid, paths[iid], int(p), int(c)) for iid, p, c in zip(tr.image_ids, tr.pids, tr.clothids)]
        descs = describe_dataset(items, cfg.factors, client, cache, PromptCatalog(), 1, cfg.use_clothing_summary)
        encoder = HashTextEncoder(int(cfg.model.get("subspace_dim", ModelConfig.subspace_dim)), cfg.seed)
        tr.text_features = text_features_from_descriptions(descs, encoder, cfg.factors, cfg.use_clothing_summary)
    out = ctx.obj["out"]
    run = Run("train", out, cfg.to_dict(), cfg.seed)
    run.inputs += [Path(dataset) / "data.bin"] + ([descriptions] if descriptions else []) + ([resume] if resume else [])
    result = fit(cfg, tr, q, g, out_dir=out, resume=resume)
    run.outputs += [out / "metrics.csv", result.final_checkpoint] + ([result.best_checkpoint] if result.best_checkpoint else [])
    summary = {"steps": result.state.step, "epochs": result.state.epoch, "final_checkpoint": str(result.final_checkpoint),
               "text_source": "descriptions" if descriptions else "oracle",
               "loss_weights": asdict(cfg.loss_weights()), "last_epoch_losses": result.state.running}
    run.finish(summary=summary)
    _emit(summary)


def _features(checkpoint, part, oracle: bool):
    if oracle:
        return part.factors["biometric"]
    state, _, _ = load_checkpoint(checkpoint)
    return extract_features(state.model, part)


@cli.command(name="eval")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--dataset", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--protocol", type=click.Choice(["general", "cc", "sc"]), default="general", show_default=True)
@click.option("--metric", type=click.Choice(["euclidean", "cosine"]), default="euclidean", show_default=True)
@click.option("--topk", type=int, default=10, show_default=True, help="Entries per query in the retrieval report.")
@click.option("--oracle-features", is_flag=True, help="Use ground-truth identity factors instead of a model.")
@click.pass_context
def eval_cmd(ctx, checkpoint, dataset, protocol, metric, topk, oracle_features):
    """Rank-k / mAP under a protocol plus a top-k retrieval report."""
    if checkpoint is None and not oracle_features:
        raise ValidationError("--checkpoint is required unless --oracle-features is set")
    ds = load_dataset(dataset)
    q, g = ds.part("query"), ds.part("gallery")
    qf, gf = _features(checkpoint, q, oracle_features), _features(checkpoint, g, oracle_features)
    dist = pairwise_distances(qf, gf, metric)
    mask = build_protocol_mask({"pid": q.pids, "camid": q.camids, "clothid": q.clothids},
                               {"pid": g.pids, "camid": g.camids, "clothid": g.clothids}, protocol)
    res = cmc_map(dist, mask)
    out = ctx.obj["out"]
    out.mkdir(parents=True, exist_ok=True)
    run = Run("eval", out, {"protocol": protocol, "metric": metric, "topk": topk, "oracle": oracle_features},
              ctx.obj["seed"])
    run.inputs += [p for p in (checkpoint, Path(dataset) / "data.bin") if p]
    payload = res.to_dict()
    (out / "eval.json").write_text(json.dumps(payload, indent=2))
    write_retrieval_report(retrieval_report(q.image_ids, dist, mask, topk, g.image_ids),
                           out / "retrieval.jsonl", out / "retrieval.html")
    run.outputs += [out / "eval.json", out / "retrieval.jsonl", out / "retrieval.html"]
    run.finish()
    _emit({**payload, "cmc": payload["cmc"][:10], "num_excluded_queries": res.num_excluded})


LABELS = {"pid": "pids", "clothing": "clothids", "camera": "camids"}


def _part(ds, split):
    if split == "test":
        return ds.data.subset(np.flatnonzero(ds.split != "train"))
    return ds.part(split)


@cli.command()
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--dataset", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--factor", type=click.Choice(sorted(LABELS)), default="clothing", show_default=True)
@click.option("--split", type=click.Choice(["test", "train"]), default="test", show_default=True,
              help="'test' = query+gallery identities.")
@click.option("--shuffle-labels", is_flag=True, help="Permute labels (chance-level control).")
@click.pass_context
def probe(ctx, checkpoint, dataset, factor, split, shuffle_labels):
    """Linear-probe accuracy for one factor on frozen features."""
    seed = ctx.obj["seed"] if ctx.obj["seed"] is not None else 0
    ds = load_dataset(dataset)
    part = _part(ds, split)
    feats = _features(checkpoint, part, False)
    labels = getattr(part, LABELS[factor])
    if shuffle_labels:
        labels = np.random.default_rng(seed).permutation(labels)
    acc = linear_probe(feats, labels, seed)
    out = ctx.obj["out"]
    out.mkdir(parents=True, exist_ok=True)
    payload = {"factor": factor, "split": split, "accuracy": acc, "num_samples": int(len(labels)),
               "num_classes": int(len(np.unique(labels))), "seed": seed, "shuffled": shuffle_labels,
               "checkpoint": str(checkpoint)}
    path = out / f"probe_{factor}.json"
    path.write_text(json.dumps(payload, indent=2))
    run = Run("probe", out, {k: payload[k] for k in ("factor", "split", "shuffled")}, seed)
    run.inputs += [checkpoint, Path(dataset) / "data.bin"]
    run.outputs.append(path)
    run.finish()
    _emit(payload)


@cli.command()
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--dataset", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--labels", "label_kind", type=click.Choice(sorted(LABELS)), default="clothing", show_default=True)
@click.option("--source", type=click.Choice(["features", "text"]), default="features", show_default=True,
              help="Project image features from the checkpoint, or the dataset's text features.")
@click.option("--aspect", default="clothing", show_default=True, help="Text aspect for --source text.")
@click.option("--split", type=click.Choice(["test", "train"]), default="test", show_default=True)
@click.pass_context
def report(ctx, checkpoint, dataset, label_kind, source, aspect, split):
    """2-D projection and per-label separation report (JSON + SVG)."""
    ds = load_dataset(dataset)
    part = _part(ds, split)
    if source == "text":
        if aspect not in part.text_features:
            raise ValidationError(f"dataset has no {aspect!r} text features")
        feats = part.text_features[aspect]
    else:
        if checkpoint is None:
            raise ValidationError("--checkpoint is required for --source features")
        feats = _features(checkpoint, part, False)
    rep = cluster_report(feats, getattr(part, LABELS[label_kind]))
    out = ctx.obj["out"]
    out.mkdir(parents=True, exist_ok=True)
    (out / "cluster_report.json").write_text(json.dumps(rep))
    (out / "cluster.svg").write_text(cluster_svg(rep))
    run = Run("report", out, {"labels": label_kind, "source": source, "aspect": aspect, "split": split},
              ctx.obj["seed"])
    run.inputs += [p for p in (checkpoint, Path(dataset) / "data.bin") if p]
    run.outputs += [out / "cluster_report.json", out / "cluster.svg"]
    run.finish()
    _emit({"mean_separation": rep["mean_separation"], "explained_variance_ratio": rep["explained_variance_ratio"],
           "report": str(out / "cluster_report.json")})


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="disentangle-reid", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("Aborted.", err=True)
        return EXIT_RUNTIME
    except (ValidationError, FileNotFoundError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        return EXIT_RUNTIME
    return 0


def run() -> None:
    sys.exit(main())
