"""
data_model.py

Turns the per-device N-BaIoT CSV files (or a synthetic stand-in) into the
normalized train / eval / test splits used by every training mode.

The split rules, per device:

* 5000 benign rows for training and another 3000 benign rows for evaluation
  (the evaluation rows only ever feed the anomaly threshold).
* 500 rows of every attack type the device has seen, plus the same number of
  benign rows, for a balanced test set.

Min-max statistics come from the training rows of all devices and are then
applied, unclipped, to every split.

"""

import hashlib
import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from os import path, listdir

import numpy as np
import pandas as pd

from .exception import DataError

logger = logging.getLogger(__name__)

N_FEATURES = 115
TRAIN_ROWS = 5000
EVAL_ROWS = 3000
ATTACK_ROWS_PER_TYPE = 500
SHIFTED_FEATURES = 15

NBAIOT_DEVICES = (
    "Danmini_Doorbell",
    "Ecobee_Thermostat",
    "Ennio_Doorbell",
    "Philips_B120N10_Baby_Monitor",
    "Provision_PT_737E_Security_Camera",
    "Provision_PT_838_Security_Camera",
    "Samsung_SNH_1011_N_Webcam",
    "SimpleHome_XCS7_1002_WHT_Security_Camera",
    "SimpleHome_XCS7_1003_WHT_Security_Camera",
)

# These two devices were never infected by Mirai
BASHLITE_ONLY_DEVICES = frozenset({"Ennio_Doorbell", "Samsung_SNH_1011_N_Webcam"})

BASHLITE_ATTACKS = ("gafgyt.combo", "gafgyt.junk", "gafgyt.scan", "gafgyt.tcp", "gafgyt.udp")
MIRAI_ATTACKS = ("mirai.ack", "mirai.scan", "mirai.syn", "mirai.udp", "mirai.udpplain")

BENIGN_FILE_NAMES = ("benign.csv", "benign_traffic.csv")

@dataclass
class RawDeviceData:
    device_id: str
    benign: np.ndarray
    attacks: dict
    source_hashes: dict = field(default_factory=dict)

    @property
    def n_features(self):
        return self.benign.shape[1]

@dataclass
class NormalizationStats:
    min_vec: np.ndarray
    max_vec: np.ndarray

@dataclass
class DeviceDataset:
    """
    One device's normalized splits. ``test_labels`` uses 0 for benign and 1
    for attack rows.
    """
    device_id: str
    train: np.ndarray
    eval: np.ndarray
    test_features: np.ndarray
    test_labels: np.ndarray
    attack_counts: dict = field(default_factory=dict)

    def row_counts(self):
        return {
            "train": int(self.train.shape[0]), "eval": int(self.eval.shape[0]),
            "test": int(self.test_features.shape[0]),
            "test_attack": int(self.test_labels.sum()),
        }

@dataclass
class SplitSelection:
    """Row indices picked for one device, before any scaling"""
    train: np.ndarray
    eval: np.ndarray
    benign_test: np.ndarray
    attacks: dict

def file_sha256(file_path):
    digest = hashlib.sha256()
    with open(file_path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()

def attack_type_id(file_path):
    """
    :param file_path: str

    Either ``<device>/<family>.<type>.csv`` or the published layout
    ``<device>/<family>_attacks/<type>.csv``

    :return: ``str``

    An id such as ``mirai.syn`` or ``gafgyt.tcp``
    """
    parent = path.basename(path.dirname(file_path))
    stem = path.splitext(path.basename(file_path))[0]
    if parent.endswith("_attacks"):
        return "{}.{}".format(parent[:-len("_attacks")], stem)
    return stem

def is_benign_file(file_path):
    return path.basename(file_path) in BENIGN_FILE_NAMES

def discover_device_files(root, device_id):
    """
    :return: ``list[str]``

    The benign file and every attack file found for the device, sorted.

    :raises: ``DataError``

    If the device directory or its benign file is missing.
    """
    device_dir = path.join(root, device_id)
    if not path.isdir(device_dir):
        raise DataError("Missing device directory {}".format(device_dir))
    found = []
    for entry in sorted(listdir(device_dir)):
        full = path.join(device_dir, entry)
        if path.isdir(full) and entry.endswith("_attacks"):
            found.extend(
                path.join(full, name) for name in sorted(listdir(full)) if name.endswith(".csv")
            )
        elif entry.endswith(".csv"):
            found.append(full)
    if not any(is_benign_file(p) for p in found):
        raise DataError("No benign traffic file ({}) in {}".format(
            " or ".join(BENIGN_FILE_NAMES), device_dir
        ))
    return found

def read_feature_csv(file_path, n_features=N_FEATURES):
    """
    :return: ``np.ndarray``

    The numeric body of the CSV as float64, rows in file order.

    :raises: ``DataError``

    Naming the file and line when the file is missing, has the wrong number of
    columns, or contains a missing / non-numeric cell.
    """
    if not path.isfile(file_path):
        raise DataError("Missing file {}".format(file_path))
    try:
        frame = pd.read_csv(file_path)
    except pd.errors.ParserError as e:
        raise DataError("{}: {}".format(file_path, e))
    except pd.errors.EmptyDataError:
        raise DataError("{}: file is empty (line 1)".format(file_path))

    if frame.shape[1] != n_features:
        raise DataError("{}, line 1: expected {} columns, found {}".format(
            file_path, n_features, frame.shape[1]
        ))

    numeric = frame.apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().to_numpy()
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise DataError("{}, line {}: missing or non-numeric value {!r} in column {}".format(
            file_path, row + 2, frame.iat[row, col], frame.columns[col]
        ))
    return numeric.to_numpy(dtype=np.float64)

def load_device_csv(paths, device_id, n_features=N_FEATURES):
    """
    :param paths: list[str]

    The device's CSV files. Benign files are recognized by name; every other
    file is an attack type whose id is derived from its path.

    :param device_id: str

    :return: ``RawDeviceData``

    :raises: ``DataError``

    If a file is missing or malformed, or there is no benign file.
    """
    benign_parts, attacks, hashes = [], {}, {}
    for file_path in paths:
        matrix = read_feature_csv(file_path, n_features)
        hashes[path.basename(path.dirname(file_path)) + "/" + path.basename(file_path)] = \
            file_sha256(file_path)
        if is_benign_file(file_path):
            benign_parts.append(matrix)
        else:
            attacks[attack_type_id(file_path)] = matrix
    if not benign_parts:
        raise DataError("No benign traffic file among the inputs for {}".format(device_id))
    benign = np.concatenate(benign_parts, axis=0)
    logger.info(
        "Loaded %s: %d benign rows, %d attack types", device_id, benign.shape[0], len(attacks)
    )
    return RawDeviceData(device_id=device_id, benign=benign, attacks=attacks, source_hashes=hashes)

def load_nbaiot(root, device_ids=NBAIOT_DEVICES, max_workers=4):
    """
    Load several devices concurrently.

    :raises: ``DataError``

    Listing every missing device directory at once.
    """
    missing = [d for d in device_ids if not path.isdir(path.join(root, d))]
    if missing:
        raise DataError("Missing device directories under {}: {}".format(
            root, ", ".join(missing)
        ))
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(
            lambda d: load_device_csv(discover_device_files(root, d), d), device_ids
        ))

def compute_global_minmax(train_sets):
    """
    :param train_sets: list[np.ndarray]

    Training matrices only, never evaluation or test rows.

    :return: ``NormalizationStats``

    Column-wise min and max over the concatenation of all inputs.
    """
    matrices = [np.asarray(m, dtype=np.float64) for m in train_sets]
    if not matrices or all(m.shape[0] == 0 for m in matrices):
        raise DataError("Cannot compute normalization statistics without training rows")
    widths = {m.shape[1] for m in matrices}
    if len(widths) != 1:
        raise DataError("Training matrices have different widths: {}".format(sorted(widths)))
    stacked = np.concatenate(matrices, axis=0)
    return NormalizationStats(min_vec=stacked.min(axis=0), max_vec=stacked.max(axis=0))

def normalize(m, stats):
    """
    :return: ``np.ndarray``

    ``(m - min) / (max - min)`` column-wise; constant columns map to 0.0.
    Values are not clipped, so attack rows may fall outside [0, 1].
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != stats.min_vec.shape[0]:
        raise ValueError("Expected width {}, got shape {}".format(stats.min_vec.shape[0], m.shape))
    spread = stats.max_vec - stats.min_vec
    out = np.zeros_like(m)
    np.divide(m - stats.min_vec, spread, out=out, where=np.broadcast_to(spread > 0, m.shape))
    return out

def device_rng(seed, device_id):
    return np.random.default_rng([int(seed), zlib.crc32(device_id.encode("utf-8"))])

def select_device_rows(raw, seed, train_rows=TRAIN_ROWS, eval_rows=EVAL_ROWS,
                       attack_rows=ATTACK_ROWS_PER_TYPE):
    """
    Pick row indices for one device: seeded uniform sampling without
    replacement. An attack type with fewer than ``attack_rows`` rows
    contributes all of them, and the benign test rows shrink to match.

    :return: ``SplitSelection``

    :raises: ``DataError``

    If the benign file is too short, naming the deficit.
    """
    rng = device_rng(seed, raw.device_id)
    attacks = {}
    for attack_id in sorted(raw.attacks):
        available = raw.attacks[attack_id].shape[0]
        if available == 0:
            continue
        if available < attack_rows:
            logger.warning(
                "%s: %s has only %d rows, taking all of them",
                raw.device_id, attack_id, available
            )
        attacks[attack_id] = rng.choice(available, size=min(attack_rows, available), replace=False)

    n_attack = sum(len(idx) for idx in attacks.values())
    needed = train_rows + eval_rows + n_attack
    available = raw.benign.shape[0]
    if available < needed:
        raise DataError(
            "{} has {} benign rows but needs {} ({} train + {} eval + {} test); short by {}".format(
                raw.device_id, available, needed, train_rows, eval_rows, n_attack,
                needed - available
            )
        )
    order = rng.permutation(available)
    return SplitSelection(
        train=order[:train_rows],
        eval=order[train_rows:train_rows + eval_rows],
        benign_test=order[train_rows + eval_rows:needed],
        attacks=attacks,
    )

def synthesize_device_split(raw, stats, seed, **sizes):
    """
    :param raw: RawDeviceData

    :param stats: NormalizationStats

    Computed from the training rows of all devices, see
    :py:func:`prepare_datasets`.

    :param seed: int

    :return: ``DeviceDataset``

    Normalized, balanced splits. The same seed selects the same rows.
    """
    selection = select_device_rows(raw, seed, **sizes)
    attack_ids = sorted(selection.attacks)
    attack_rows = [raw.attacks[a][selection.attacks[a]] for a in attack_ids]
    benign_test = raw.benign[selection.benign_test]
    parts = attack_rows + [benign_test]
    test = np.concatenate(parts, axis=0) if parts else np.zeros((0, raw.n_features))
    n_attack = sum(r.shape[0] for r in attack_rows)
    labels = np.concatenate([
        np.ones(n_attack, dtype=np.int8), np.zeros(benign_test.shape[0], dtype=np.int8)
    ])
    return DeviceDataset(
        device_id=raw.device_id,
        train=normalize(raw.benign[selection.train], stats),
        eval=normalize(raw.benign[selection.eval], stats),
        test_features=normalize(test, stats),
        test_labels=labels,
        attack_counts={a: int(len(selection.attacks[a])) for a in attack_ids},
    )

def prepare_datasets(raws, seed, **sizes):
    """
    Run the whole pipeline: pick rows, fit min-max on the training rows of
    every device, then build each device's normalized splits.

    :return: ``tuple(list[DeviceDataset], NormalizationStats)``
    """
    selections = [select_device_rows(raw, seed, **sizes) for raw in raws]
    for selection in selections:
        assert not np.intersect1d(selection.train, selection.eval).size
    train_sets = [raw.benign[sel.train] for raw, sel in zip(raws, selections)]
    stats = compute_global_minmax(train_sets)
    datasets = [synthesize_device_split(raw, stats, seed, **sizes) for raw in raws]
    for dataset in datasets:
        counts = dataset.row_counts()
        logger.info(
            "%s: train=%d eval=%d test=%d (attack=%d)", dataset.device_id,
            counts["train"], counts["eval"], counts["test"], counts["test_attack"]
        )
    return datasets, stats

def build_global_testset(devices):
    """
    :return: ``tuple(np.ndarray, np.ndarray)``

    Every device's test features and labels, concatenated in device order.
    """
    if not devices:
        raise DataError("Cannot build a test set without devices")
    features = np.concatenate([d.test_features for d in devices], axis=0)
    labels = np.concatenate([d.test_labels for d in devices])
    return features, labels

def synthetic_device_ids(n_devices):
    return ["synthetic_{:02d}_{}".format(i, NBAIOT_DEVICES[i % len(NBAIOT_DEVICES)])
            for i in range(n_devices)]

def generate_synthetic_corpus(n_devices, seed, n_features=N_FEATURES, benign_rows=None,
                              attack_rows_per_type=600, sigma=0.02, shift=0.3,
                              shifted_features=None, device_spread=0.02):
    """
    Build a corpus shaped like N-BaIoT for tests and CI runs.

    All devices share one base centre drawn from [0.25, 0.75]. Each device
    offsets it by at most ``device_spread`` per feature, and its benign
    traffic is a tight Gaussian cluster (``sigma``) around that centre. Each
    attack type moves the centre by ``shift`` on ``shifted_features``
    coordinates, towards the other half of [0, 1] (down where the base centre
    is above 0.5, up otherwise). Devices mirror the catalogue: the
    BASHLITE-only ones get 5 attack types, the rest 10.

    :kwarg shifted_features: int

    Defaults to ``min(15, n_features)``.

    :return: ``list[RawDeviceData]``

    :raises: ``DataError``

    If ``n_devices`` is below 1 or ``shifted_features`` is outside
    ``[1, n_features]``.
    """
    if n_devices < 1:
        raise DataError("n_devices must be at least 1")
    if shifted_features is None:
        shifted_features = min(SHIFTED_FEATURES, n_features)
    if not 1 <= shifted_features <= n_features:
        raise DataError("shifted_features must be between 1 and {} (got {})".format(
            n_features, shifted_features
        ))
    base = np.random.default_rng([int(seed)]).uniform(0.25, 0.75, size=n_features)
    direction = np.where(base > 0.5, -shift, shift)
    corpus = []
    for i, device_id in enumerate(synthetic_device_ids(n_devices)):
        rng = np.random.default_rng([int(seed), i])
        catalogue_name = NBAIOT_DEVICES[i % len(NBAIOT_DEVICES)]
        attack_ids = BASHLITE_ATTACKS
        if catalogue_name not in BASHLITE_ONLY_DEVICES:
            attack_ids = BASHLITE_ATTACKS + MIRAI_ATTACKS

        n_benign = benign_rows
        if n_benign is None:
            n_benign = TRAIN_ROWS + EVAL_ROWS + ATTACK_ROWS_PER_TYPE * (len(attack_ids) + 1)
        centre = base + rng.uniform(-device_spread, device_spread, size=n_features)
        benign = np.clip(centre + sigma * rng.standard_normal((n_benign, n_features)), 0.0, 1.0)

        attacks = {}
        for attack_id in attack_ids:
            columns = rng.choice(n_features, size=shifted_features, replace=False)
            attack_centre = centre.copy()
            attack_centre[columns] += direction[columns]
            attacks[attack_id] = attack_centre + sigma * rng.standard_normal(
                (attack_rows_per_type, n_features)
            )
        corpus.append(RawDeviceData(
            device_id=device_id, benign=benign, attacks=attacks,
            source_hashes={"synthetic": "seed={} device={}".format(seed, i)},
        ))
    return corpus
