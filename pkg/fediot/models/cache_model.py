"""
cache_model.py

A wrapper around the on-disk cache of prepared device datasets, so that the
2 GB of N-BaIoT CSV files are parsed once per seed instead of once per run.

Layout of a cache directory::

    <cache_dir>/manifest.txt        key = value sections, one per device
    <cache_dir>/<device_id>.bin     header, min/max vectors, then the splits

Every ``.bin`` file starts with the magic ``FDDS``, a version byte and the
``uint32`` feature / train / eval / test row counts. The normalization
vectors and all matrices follow as little-endian float64, row-major, and the
test labels close the file as one byte per row.

"""

import configparser
import hashlib
import logging
import shutil
import struct
from os import makedirs, path

import numpy as np

from .data_model import DeviceDataset, NormalizationStats, file_sha256
from .exception import DataError

logger = logging.getLogger(__name__)

MAGIC = b"FDDS"
VERSION = 1
HEADER = struct.Struct("<4sBIIII")
MANIFEST_NAME = "manifest.txt"

class DatasetCache:
    """
    A wrapper around a directory of prepared datasets.

    :param cache_dir: str

    Where the manifest and the per-device binaries live.

    """

    def __init__(self, cache_dir):
        self.cache_dir = cache_dir

    def launch(self):
        """
        Create the cache directory if it does not exist yet.
        """
        makedirs(self.cache_dir, exist_ok=True)
        return self

    def clear(self):
        """
        Delete the cache directory and everything in it.
        """
        if path.isdir(self.cache_dir):
            shutil.rmtree(self.cache_dir)

    @property
    def manifest_path(self):
        return path.join(self.cache_dir, MANIFEST_NAME)

    def device_path(self, device_id):
        return path.join(self.cache_dir, "{}.bin".format(device_id))

    def exists(self):
        return path.isfile(self.manifest_path)

    def save(self, datasets, stats, seed, dataset_name, source_hashes=None):
        """
        :param datasets: list[DeviceDataset]

        :param stats: NormalizationStats

        :param seed: int

        :param dataset_name: str

        ``nbaiot`` or ``synthetic``

        :kwarg source_hashes: dict

        device_id -> {file name: sha256} of the inputs the splits came from

        :return: ``str``

        The manifest hash, which identifies this exact set of splits.
        """
        self.launch()
        source_hashes = source_hashes or {}
        manifest = configparser.ConfigParser()
        manifest.optionxform = str
        manifest["dataset"] = {
            "name": dataset_name, "seed": str(seed), "n_devices": str(len(datasets)),
            "n_features": str(stats.min_vec.shape[0]),
            "devices": ",".join(d.device_id for d in datasets),
        }
        for dataset in datasets:
            device_file = self.device_path(dataset.device_id)
            with open(device_file, "wb") as f:
                f.write(encode_device(dataset, stats))
            section = {"file": path.basename(device_file), "sha256": file_sha256(device_file)}
            section.update({k: str(v) for k, v in dataset.row_counts().items()})
            section.update({
                "attack." + k: str(v) for k, v in sorted(dataset.attack_counts.items())
            })
            section.update({
                "source." + k: v
                for k, v in sorted(source_hashes.get(dataset.device_id, {}).items())
            })
            manifest["device." + dataset.device_id] = section

        with open(self.manifest_path, "w") as f:
            manifest.write(f)
        logger.info("Wrote %d devices to %s", len(datasets), self.cache_dir)
        return self.manifest_hash()

    def read_manifest(self):
        """
        :return: ``configparser.ConfigParser``

        :raises: ``DataError``

        If the cache has not been prepared.
        """
        if not self.exists():
            raise DataError(
                "No prepared dataset in {}; run `prepare-data` first".format(self.cache_dir)
            )
        manifest = configparser.ConfigParser()
        manifest.optionxform = str
        manifest.read(self.manifest_path)
        return manifest

    def manifest_hash(self):
        with open(self.manifest_path, "rb") as f:
            return hashlib.sha256(f.read()).hexdigest()

    def device_ids(self):
        devices = self.read_manifest()["dataset"]["devices"]
        return [d for d in devices.split(",") if d]

    def load_device(self, device_id, verify=True):
        """
        :return: ``tuple(DeviceDataset, NormalizationStats)``

        :raises: ``DataError``

        If the device is not in the cache or its file does not match the
        manifest.
        """
        manifest = self.read_manifest()
        section_name = "device." + device_id
        if section_name not in manifest:
            raise DataError("Device {} is not in the cache at {}".format(device_id, self.cache_dir))
        section = manifest[section_name]
        device_file = self.device_path(device_id)
        if not path.isfile(device_file):
            raise DataError("Missing cache file {}".format(device_file))
        if verify and file_sha256(device_file) != section["sha256"]:
            raise DataError("{} does not match its manifest hash".format(device_file))
        with open(device_file, "rb") as f:
            dataset, stats = decode_device(f.read(), device_id)
        dataset.attack_counts = {
            k[len("attack."):]: int(v) for k, v in section.items() if k.startswith("attack.")
        }
        return dataset, stats

    def load_all(self, verify=True):
        """
        :return: ``tuple(list[DeviceDataset], NormalizationStats)``

        Devices in manifest order.
        """
        datasets, stats = [], None
        for device_id in self.device_ids():
            dataset, stats = self.load_device(device_id, verify=verify)
            datasets.append(dataset)
        return datasets, stats

def encode_device(dataset, stats):
    n_features = stats.min_vec.shape[0]
    header = HEADER.pack(
        MAGIC, VERSION, n_features, dataset.train.shape[0], dataset.eval.shape[0],
        dataset.test_features.shape[0]
    )
    body = [
        np.ascontiguousarray(a, dtype="<f8").tobytes()
        for a in (stats.min_vec, stats.max_vec, dataset.train, dataset.eval, dataset.test_features)
    ]
    labels = np.ascontiguousarray(dataset.test_labels, dtype=np.uint8).tobytes()
    return header + b"".join(body) + labels

def decode_device(data, device_id):
    if len(data) < HEADER.size:
        raise DataError("Cache file for {} is truncated".format(device_id))
    magic, version, n_features, n_train, n_eval, n_test = HEADER.unpack_from(data)
    if magic != MAGIC or version != VERSION:
        raise DataError("Cache file for {} has an unknown format".format(device_id))
    expected = HEADER.size + 8 * n_features * (2 + n_train + n_eval + n_test) + n_test
    if len(data) != expected:
        raise DataError("Cache file for {} is {} bytes, expected {}".format(
            device_id, len(data), expected
        ))

    offset = HEADER.size
    def take(rows):
        nonlocal offset
        count = rows * n_features
        array = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        offset += 8 * count
        return array.reshape(rows, n_features).astype(np.float64)

    min_vec = take(1)[0]
    max_vec = take(1)[0]
    train, eval_rows, test = take(n_train), take(n_eval), take(n_test)
    labels = np.frombuffer(data, dtype=np.uint8, count=n_test, offset=offset).astype(np.int8)
    dataset = DeviceDataset(
        device_id=device_id, train=train, eval=eval_rows, test_features=test, test_labels=labels
    )
    return dataset, NormalizationStats(min_vec=min_vec, max_vec=max_vec)
