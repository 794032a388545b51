"""
data.py

Exposes the ``prepare-data`` command: read the raw device files (or generate
the synthetic corpus), build the per-device splits and store them in the
dataset cache that every other command reads from.

"""

import logging

import click
import pandas as pd

from .decorators import experiment_options, with_experiment_config, reports_errors
from .models import data_model
from .models.cache_model import DatasetCache
from .models.exception import ConfigError

logger = logging.getLogger(__name__)

def load_raw_devices(config, workers=4):
    """
    :return: ``list[RawDeviceData]``

    The N-BaIoT devices under ``config.data_root`` or a freshly generated
    synthetic corpus, depending on ``config.dataset``.
    """
    if config.dataset == "synthetic":
        return data_model.generate_synthetic_corpus(config.n_devices, config.seed)
    if config.n_devices > len(data_model.NBAIOT_DEVICES):
        raise ConfigError("N-BaIoT has {} devices, {} were requested".format(
            len(data_model.NBAIOT_DEVICES), config.n_devices
        ))
    return data_model.load_nbaiot(
        config.data_root, data_model.NBAIOT_DEVICES[:config.n_devices], max_workers=workers
    )

def prepare_cache(config, workers=4):
    """
    :return: ``tuple(DatasetCache, str, list[DeviceDataset])``

    The cache, its manifest hash and the prepared devices.
    """
    raws = load_raw_devices(config, workers)
    datasets, stats = data_model.prepare_datasets(raws, config.seed)
    cache = DatasetCache(config.resolved_cache_dir())
    cache.clear()
    manifest_hash = cache.save(
        datasets, stats, config.seed, config.dataset,
        source_hashes={raw.device_id: raw.source_hashes for raw in raws}
    )
    return cache, manifest_hash, datasets

def row_count_table(datasets):
    rows = [dict(device=d.device_id, **d.row_counts()) for d in datasets]
    return pd.DataFrame(rows, columns=["device", "train", "eval", "test", "test_attack"])

@click.command("prepare-data")
@experiment_options
@click.option("--workers", type=click.INT, default=4, show_default=True,
              help="Devices read in parallel")
@reports_errors
@with_experiment_config
def prepare_data(config, workers):
    """Build the per-device dataset cache."""
    cache, manifest_hash, datasets = prepare_cache(config, workers)
    click.echo(row_count_table(datasets).to_string(index=False))
    click.echo("manifest {} in {}".format(manifest_hash, cache.cache_dir))

commands = [prepare_data]
