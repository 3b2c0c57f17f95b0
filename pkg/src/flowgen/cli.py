"""Command-line pipeline: synth, build-kg, train-kge, train, generate,
evaluate, predict.

Each subcommand reads one declarative JSON config (defaults apply when no
--config is given), writes into a run directory and exits 0 on success or 1
with a one-line diagnostic naming the failing stage.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import blobio, metrics
from .config import RunConfig
from .data import Dataset, ingest, load_region_geometries, make_synthetic
from .diffusion import make_linear_schedule, save_samples
from .kge import KGEConfig, KGEmbeddingSet, train_kg_embeddings
from .trainer import (TrainedModel, Trainer, generate_for_regions,
                      predict_future, train_predictive, write_train_log)
from .ukg import UrbanKG, build_urban_kg, extract_region_subgraph

logger = logging.getLogger(__name__)

DATA_FILES = {
    "geo": "regions.geojson",
    "pois": "pois.csv",
    "features": "features.csv",
    "flow": "flow.csv",
    "split": "split.json",
    "checkins": "checkins.csv",
    "business": "business_areas.geojson",
}


class CliError(RuntimeError):
    pass


def _load_config(args) -> RunConfig:
    config = RunConfig.from_file(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    return config


def _data_path(data_dir, key, required=True):
    path = os.path.join(data_dir, DATA_FILES[key])
    if required and not os.path.exists(path):
        raise CliError(f"missing {DATA_FILES[key]} in {data_dir}")
    return path


def _load_dataset(data_dir) -> Dataset:
    dataset, report = ingest(
        _data_path(data_dir, "flow"),
        _data_path(data_dir, "features"),
        _data_path(data_dir, "geo"),
        _data_path(data_dir, "split"),
    )
    if report.dropped_days:
        logger.info("ingest dropped days: %s", report.dropped_days)
    return dataset


def cmd_synth(args) -> int:
    config = _load_config(args)
    city = make_synthetic(
        num_regions=config.synth_regions,
        num_days=config.synth_days,
        seed=config.seed,
        num_pois=config.synth_pois,
        noise_scale=config.synth_noise,
        coupling=config.synth_coupling,
    )
    city.write(args.out)
    print(f"synthetic dataset with {config.synth_regions} regions / "
          f"{config.synth_days} days written to {args.out}")
    return 0


def cmd_build_kg(args) -> int:
    import pandas as pd

    config = _load_config(args)
    geometries = load_region_geometries(_data_path(args.data, "geo"))
    pois = pd.read_csv(_data_path(args.data, "pois"))
    checkins_path = _data_path(args.data, "checkins", required=False)
    checkins = None
    if os.path.exists(checkins_path):
        checkins = pd.read_csv(checkins_path, parse_dates=["timestamp"])
    business = None
    business_path = _data_path(args.data, "business", required=False)
    if os.path.exists(business_path):
        business = load_region_geometries(business_path)
    kg, report = build_urban_kg(
        geometries, pois,
        nearby_km=config.nearby_km,
        similar_top_k=config.similar_top_k,
        checkins=checkins,
        business_areas=business,
        competitive_km=config.competitive_km,
        checkin_window_hours=config.checkin_window_hours,
    )
    kg_dir = os.path.join(args.run, "kg")
    kg.save(kg_dir)
    blobio.atomic_write_text(
        os.path.join(kg_dir, "report.json"),
        json.dumps({"num_entities": len(kg.entities), "num_facts": len(kg.facts),
                    "pois_outside_regions": report.outside_pois}, indent=2))
    print(f"KG with {len(kg.entities)} entities / {len(kg.facts)} facts -> {kg_dir}")
    return 0


def cmd_train_kge(args) -> int:
    config = _load_config(args)
    kg = UrbanKG.load(os.path.join(args.run, "kg"))
    kge_config = KGEConfig(
        d_kg=config.d_kg, epochs=config.kge_epochs, batch_size=config.kge_batch_size,
        lr=config.kge_lr, label_smoothing=config.kge_label_smoothing,
        dropout=config.kge_dropout, seed=config.seed)
    embeddings, losses = train_kg_embeddings(kg, kge_config)
    path = os.path.join(args.run, "kg_embeddings.bin")
    embeddings.save(path)
    print(f"KG embeddings trained ({config.kge_epochs} epochs, final loss "
          f"{losses[-1]:.4f}) -> {path}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    dataset = _load_dataset(args.data)
    kg = UrbanKG.load(os.path.join(args.run, "kg"))
    embeddings = KGEmbeddingSet.load(os.path.join(args.run, "kg_embeddings.bin"))
    subgraph = extract_region_subgraph(kg, dataset.train_ids)
    schedule = make_linear_schedule(config.num_steps, config.beta_start,
                                    config.beta_end)
    trainer = Trainer(dataset, embeddings, subgraph, schedule,
                      config.train_config())
    model, log = trainer.run(run_dir=args.run)
    model.save(os.path.join(args.run, "checkpoint.bin"))
    write_train_log(os.path.join(args.run, "train_log.csv"), log)
    config.to_file(os.path.join(args.run, "config.json"))
    final = [e.loss for e in log if e.phase == "diffusion"]
    print(f"trained {config.epochs} epochs (final L1 {final[-1]:.4f}) -> "
          f"{os.path.join(args.run, 'checkpoint.bin')}")
    return 0


def cmd_generate(args) -> int:
    config = _load_config(args)
    dataset = _load_dataset(args.data)
    kg = UrbanKG.load(os.path.join(args.run, "kg"))
    embeddings = KGEmbeddingSet.load(os.path.join(args.run, "kg_embeddings.bin"))
    checkpoint = os.path.join(args.run, "checkpoint.bin")
    if not os.path.exists(checkpoint):
        raise CliError(f"checkpoint not found in {args.run}; run train first")
    model = TrainedModel.load(checkpoint)
    subgraph = extract_region_subgraph(kg, dataset.test_ids)
    num_samples = args.num_samples or config.num_samples or dataset.flow.shape[0]
    samples = generate_for_regions(
        model, dataset.conditions_for(dataset.test_ids), embeddings, subgraph,
        num_samples=num_samples, seed=config.seed)
    sidecar = {
        "seed": config.seed,
        "region_ids": dataset.test_ids,
        "num_steps": model.manifest["num_steps"],
        "beta_start": model.manifest["beta_start"],
        "beta_end": model.manifest["beta_end"],
        "flow_mean": model.manifest["flow_mean"],
        "flow_std": model.manifest["flow_std"],
    }
    save_samples(os.path.join(args.run, "samples.npz"), samples, sidecar)
    print(f"generated {num_samples} samples for {len(dataset.test_ids)} test "
          f"regions -> {os.path.join(args.run, 'samples.npz')}")
    return 0


def cmd_evaluate(args) -> int:
    dataset = _load_dataset(args.data)
    report = metrics.evaluate(args.run, dataset)
    if args.plot:
        from .diffusion import load_samples

        generated, sidecar = load_samples(os.path.join(args.run, "samples.npz"))
        rows = dataset.rows_for(sidecar["region_ids"])
        metrics.plot_region_curves(generated, dataset.flow[:, rows],
                                   sidecar["region_ids"],
                                   os.path.join(args.run, "curves.png"))
    print(f"MAE {report.mae:.4f}  RMSE {report.rmse:.4f}  "
          f"SMAPE {report.smape:.4f}  MMD {report.mmd:.4f}")
    return 0


def cmd_predict(args) -> int:
    config = _load_config(args)
    dataset = _load_dataset(args.data)
    kg = UrbanKG.load(os.path.join(args.run, "kg"))
    embeddings = KGEmbeddingSet.load(os.path.join(args.run, "kg_embeddings.bin"))
    if config.t_in + config.t_out != dataset.horizon:
        raise CliError(f"t_in + t_out must equal the horizon "
                       f"({dataset.horizon}) for day-window prediction")
    subgraph = extract_region_subgraph(kg, dataset.region_ids)
    windows = dataset.normalized_flow()  # one window per day
    split = max(1, int(round(0.8 * windows.shape[0])))
    if split >= windows.shape[0]:
        raise CliError("need at least one held-out day for prediction")
    schedule = make_linear_schedule(config.num_steps, config.beta_start,
                                    config.beta_end)
    model, log = train_predictive(
        windows[:split], embeddings, subgraph, schedule,
        config.train_config(epochs=config.predict_epochs, use_guide=False),
        t_in=config.t_in, t_out=config.t_out,
        flow_mean=dataset.flow_mean, flow_std=dataset.flow_std)
    model.save(os.path.join(args.run, "predict_checkpoint.bin"))
    errors, baselines = [], []
    for w in windows[split:]:
        history = w[:, :config.t_in]
        target = w[:, config.t_in:]
        forecast = predict_future(model, history, embeddings, subgraph,
                                  num_samples=config.predict_samples,
                                  seed=config.seed)
        errors.append(float(np.mean(np.abs(forecast - target))))
        copy_last = np.repeat(history[:, -1:, :], config.t_out, axis=1)
        baselines.append(float(np.mean(np.abs(copy_last - target))))
    payload = {"model_mae": float(np.mean(errors)),
               "copy_last_mae": float(np.mean(baselines)),
               "num_eval_windows": len(errors)}
    blobio.atomic_write_text(os.path.join(args.run, "predict_metrics.json"),
                             json.dumps(payload, indent=2, sort_keys=True))
    print(f"prediction MAE {payload['model_mae']:.4f} vs copy-last "
          f"{payload['copy_last_mae']:.4f} (normalized units)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowgen",
        description="Urban flow generation with KG-guided diffusion")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, run=True):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        if data:
            p.add_argument("--data", required=True, help="dataset directory")
        if run:
            p.add_argument("--run", required=True, help="run directory")

    p = sub.add_parser("synth", help="write a synthetic dataset")
    common(p, data=False, run=False)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-kg", help="construct the urban knowledge graph")
    common(p)
    p.set_defaults(func=cmd_build_kg)

    p = sub.add_parser("train-kge", help="train KG embeddings")
    common(p, data=False)
    p.set_defaults(func=cmd_train_kge)

    p = sub.add_parser("train", help="train the diffusion model")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample flow for test regions")
    common(p)
    p.add_argument("--num-samples", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score generated samples")
    common(p)
    p.add_argument("--plot", action="store_true", help="also write curves.png")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="masked-window flow prediction")
    common(p)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "run", None):
        os.makedirs(args.run, exist_ok=True)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single CLI diagnostic boundary
        print(f"flowgen {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
