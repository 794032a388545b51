"""
experiment.py

Exposes the ``train``, ``evaluate`` and ``report`` commands.

``train`` runs one of the three modes on a prepared dataset cache and writes
the run directory described in :py:mod:`fediot.models.report_model`.
``evaluate`` re-scores a saved run, optionally with a different ``alpha``.
``report`` assembles several runs into the comparison tables.

"""

import logging
import math
import time
from os import path

import click
import numpy as np

from .decorators import experiment_options, with_experiment_config, reports_errors
from .models.anomaly_model import compute_threshold, average_metrics
from .models.cache_model import DatasetCache
from .models.config import ExperimentConfig
from .models.data_model import build_global_testset
from .models.federation_model import (
    run_feddetect, run_cl_single_all, run_cl_combined, evaluate_model
)
from .models.nn_model import reconstruction_errors
from .models.report_model import (
    RunReport, render_tables, save_model, load_model, model_file_name, threshold_file_name,
    write_threshold, read_threshold
)
from .models.transport_model import Broker, LoopbackTransport, TcpTransport

logger = logging.getLogger(__name__)

def resolve_run_id(config):
    return config.run_id or "{}-{}-seed{}".format(config.mode, config.dataset, config.seed)

def load_prepared(config):
    """
    :return: ``tuple(DatasetCache, list[DeviceDataset])``

    :raises: ``DataError``

    If ``prepare-data`` has not been run for this dataset.
    """
    cache = DatasetCache(config.resolved_cache_dir())
    datasets, _ = cache.load_all()
    return cache, datasets

def dataset_info(config, cache, datasets):
    return {
        "name": config.dataset, "cache_dir": cache.cache_dir,
        "manifest_hash": cache.manifest_hash(),
        "devices": ",".join(d.device_id for d in datasets),
    }

def fl_report(config, result, info):
    """
    :return: ``RunReport``

    The report of a finished federated run.
    """
    stats = result.stats
    return RunReport(
        run_id=config.run_id, mode="fl", config=config.to_dict(), metrics=result.metrics,
        threshold=result.threshold.tr_global, confusion=stats.confusion, comm=stats.comm,
        loss_curve=[r.mean_local_loss for r in stats.rounds],
        eval_curve=[r.eval_mse for r in stats.rounds if r.eval_mse is not None],
        lr_curve=[r.lr for r in stats.rounds], wall_seconds=stats.wall_seconds, dataset=info,
    )

def train_fl(config, datasets, info, out_dir, attach=False):
    federation = config.federation_config(len(datasets))
    model_config = config.autoencoder_config(datasets[0].train.shape[1])
    broker = None
    if config.transport == "tcp":
        host, port = config.broker_host_port()
        if config.latency:
            logger.warning("latency=%s only applies to the loopback transport", config.latency)
        if not attach:
            broker = Broker(host, port).start()
            host, port = broker.address
        transport = TcpTransport(host, port)
    else:
        transport = LoopbackTransport(latency=config.latency)

    try:
        result = run_feddetect(
            federation, datasets, transport, config.seed, model_config=model_config,
            run_id=config.run_id, registration_timeout=config.registration_timeout,
            round_timeout=config.round_timeout,
        )
    finally:
        if broker is not None:
            broker.stop()
    save_model(result.model, path.join(out_dir, model_file_name()))
    return fl_report(config, result, info)

def train_cl_single(config, datasets, info, out_dir):
    started = time.monotonic()
    results, averaged = run_cl_single_all(
        datasets, config.federation_config(len(datasets)),
        config.autoencoder_config(datasets[0].train.shape[1]), config.seed
    )
    for result in results:
        save_model(result.model, path.join(out_dir, model_file_name(result.device_id)))
        write_threshold(result.threshold, path.join(out_dir, threshold_file_name(result.device_id)))
    curves = np.array([r.loss_curve for r in results])
    return RunReport(
        run_id=config.run_id, mode="cl-single", config=config.to_dict(), metrics=averaged,
        loss_curve=list(curves.mean(axis=0)) if curves.size else [],
        wall_seconds=time.monotonic() - started, dataset=info,
        per_device={r.device_id: (r.metrics, r.threshold.tr) for r in results},
    )

def train_cl_combined(config, datasets, info, out_dir):
    started = time.monotonic()
    result = run_cl_combined(
        datasets, config.federation_config(len(datasets)),
        config.autoencoder_config(datasets[0].train.shape[1]), config.seed
    )
    save_model(result.model, path.join(out_dir, model_file_name()))
    return RunReport(
        run_id=config.run_id, mode="cl-combined", config=config.to_dict(),
        metrics=result.metrics, threshold=result.threshold, confusion=result.confusion,
        loss_curve=result.loss_curve, wall_seconds=time.monotonic() - started, dataset=info,
    )

def run_experiment(config, attach=False):
    """
    Train in ``config.mode`` and write the run directory.

    :return: ``tuple(RunReport, str)``

    The report and the run directory.
    """
    config = config.with_overrides(run_id=resolve_run_id(config))
    cache, datasets = load_prepared(config)
    info = dataset_info(config, cache, datasets)
    out_dir = path.join(config.output_dir, config.run_id)
    logger.info("Run %s: %s on %d %s devices", config.run_id, config.mode, len(datasets),
                config.dataset)

    if config.mode == "fl":
        report = train_fl(config, datasets, info, out_dir, attach=attach)
    elif config.mode == "cl-single":
        report = train_cl_single(config, datasets, info, out_dir)
    else:
        report = train_cl_combined(config, datasets, info, out_dir)
    report.write(out_dir)
    return report, out_dir

@click.command("train")
@experiment_options
@click.option("--attach", is_flag=True,
              help="Use the broker already listening on --broker-addr (tcp only)")
@reports_errors
@with_experiment_config
def train(config, attach):
    """Run fl, cl-single or cl-combined and write a run report."""
    report, _ = run_experiment(config, attach=attach)
    click.echo(report.metrics_line())

def evaluate_run(run_dir, alpha=None, cache_dir=None):
    """
    Score a saved run against its prepared dataset.

    :kwarg alpha: float

    If given, recompute the threshold(s) from the eval splits with this
    ``alpha`` instead of reading the saved ones.

    :return: ``RunReport``

    A report holding only the new metrics and threshold.
    """
    saved = RunReport.read(run_dir)
    config = ExperimentConfig.from_dict(saved.config)
    if cache_dir:
        config = config.with_overrides(cache_dir=cache_dir)
    cache, datasets = load_prepared(config)
    if cache.manifest_hash() != saved.manifest_hash:
        logger.warning("The dataset cache changed since run %s was trained", saved.run_id)
    model_config = config.autoencoder_config(datasets[0].train.shape[1])
    features, labels = build_global_testset(datasets)

    threshold, per_device = None, {}
    if saved.mode == "cl-single":
        for device in datasets:
            model = load_model(path.join(run_dir, model_file_name(device.device_id)), model_config)
            if alpha is None:
                device_threshold = read_threshold(
                    path.join(run_dir, threshold_file_name(device.device_id))
                )
            else:
                device_threshold = compute_threshold(
                    reconstruction_errors(model, device.eval), alpha
                )
            _, device_metrics = evaluate_model(model, features, labels, device_threshold)
            per_device[device.device_id] = (device_metrics, device_threshold.tr)
        metrics = average_metrics([m for m, _ in per_device.values()])
        confusion = None
    else:
        model = load_model(path.join(run_dir, model_file_name()), model_config)
        if alpha is None:
            threshold = read_threshold(path.join(run_dir, threshold_file_name()))
        else:
            scores = np.concatenate([reconstruction_errors(model, d.eval) for d in datasets])
            threshold = compute_threshold(scores, alpha)
        confusion, metrics = evaluate_model(model, features, labels, threshold)

    return RunReport(
        run_id=saved.run_id, mode=saved.mode, config=saved.config, metrics=metrics,
        threshold=threshold, confusion=confusion, wall_seconds=math.nan,
        dataset=dataset_info(config, cache, datasets), per_device=per_device,
    )

@click.command("evaluate")
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--alpha", type=click.FLOAT, default=None,
              help="Re-threshold from the eval splits with this alpha")
@click.option("--cache-dir", default=None, help="Prepared dataset to score against")
@reports_errors
def evaluate(run_dir, alpha, cache_dir):
    """Re-score a saved run."""
    click.echo(evaluate_run(run_dir, alpha=alpha, cache_dir=cache_dir).metrics_line())

@click.command("report")
@click.argument("run_dirs", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--output", type=click.Path(dir_okay=False), default=None,
              help="Also write the tables to this file")
@reports_errors
def report(run_dirs, output):
    """Compare runs in the Acc / FPR / TPR / TNR and timing tables."""
    text = render_tables([RunReport.read(d) for d in run_dirs])
    click.echo(text)
    if output:
        with open(output, "w") as f:
            f.write(text + "\n")

commands = [train, evaluate, report]
