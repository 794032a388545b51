"""
report_model.py

Everything a run leaves behind, and the tables assembled from several runs.

A run directory ``<output_dir>/<run_id>/`` holds:

* ``report.txt``: INI sections ``[run]``, ``[config]``, ``[dataset]``,
  ``[metrics]``, ``[threshold]``, ``[comm]``, ``[loss_curve]`` and, for
  ``cl-single`` runs, one ``[device.<id>]`` section per device.
* ``metrics.line``: one line of ``key=value`` pairs for scripts.
* ``threshold.txt``: the detection threshold and the statistics behind it.
* ``model.bin``: the trained model as a WireModel (``cl-single`` runs write
  ``model.<device_id>.bin`` instead).

Together, the config snapshot and the dataset manifest hash are enough to
reproduce the run.

"""

import configparser
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from os import makedirs, path

import pandas as pd

from .anomaly_model import DetectionThreshold, ConfusionMatrix, Metrics, format_rate
from .exception import DataError
from .transport_model import CommStats
from .wire_model import encode_model, decode_model

logger = logging.getLogger(__name__)

REPORT_NAME = "report.txt"
METRICS_LINE_NAME = "metrics.line"
THRESHOLD_NAME = "threshold.txt"
MODEL_NAME = "model.bin"

MODE_LABELS = {"cl-single": "CL-Single", "cl-combined": "CL-Combined", "fl": "FL-FedDetect"}
RATE_KEYS = ("acc", "fpr", "tpr", "tnr")

def _number(value):
    return "n/a" if value is None else repr(float(value))

def _parse_number(value):
    return None if value.strip() == "n/a" else float(value)

def _floats(values):
    return ",".join(_number(v) for v in values)

def _parse_floats(value):
    return [_parse_number(v) for v in value.split(",") if v.strip()]

@dataclass
class RunReport:
    run_id: str
    mode: str
    config: dict
    metrics: Metrics
    threshold: DetectionThreshold = None
    confusion: ConfusionMatrix = None
    comm: CommStats = None
    loss_curve: list = field(default_factory=list)
    eval_curve: list = field(default_factory=list)
    lr_curve: list = field(default_factory=list)
    wall_seconds: float = 0.0
    dataset: dict = field(default_factory=dict)
    per_device: dict = field(default_factory=dict)
    created_at: str = ""

    @property
    def manifest_hash(self):
        return self.dataset.get("manifest_hash", "")

    def to_parser(self):
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        parser["run"] = {
            "run_id": self.run_id, "mode": self.mode,
            "created_at": self.created_at or datetime.now(timezone.utc).isoformat(),
            "wall_seconds": _number(self.wall_seconds),
        }
        parser["config"] = dict(self.config)
        parser["dataset"] = dict(self.dataset)
        parser["metrics"] = {k: _number(getattr(self.metrics, k)) for k in RATE_KEYS}
        if self.confusion is not None:
            parser["metrics"].update({
                k: str(getattr(self.confusion, k)) for k in ("tp", "tn", "fp", "fn")
            })
        if self.threshold is not None:
            parser["threshold"] = threshold_section(self.threshold)
        if self.comm is not None:
            comm_ratio, compute_ratio = self.comm.ratios()
            parser["comm"] = {
                "bytes_up": str(self.comm.bytes_up), "bytes_down": str(self.comm.bytes_down),
                "comm_seconds": _number(self.comm.comm_seconds),
                "compute_seconds": _number(self.comm.compute_seconds),
                "server_seconds": _number(self.comm.server_seconds),
                "comm_ratio": _number(comm_ratio), "compute_ratio": _number(compute_ratio),
            }
        parser["loss_curve"] = {
            "loss": _floats(self.loss_curve), "eval_mse": _floats(self.eval_curve),
            "lr": _floats(self.lr_curve),
        }
        for device_id, (device_metrics, tr) in sorted(self.per_device.items()):
            section = {k: _number(getattr(device_metrics, k)) for k in RATE_KEYS}
            section["tr"] = _number(tr)
            parser["device." + device_id] = section
        return parser

    def metrics_line(self):
        """
        :return: ``str``

        e.g. ``run_id=r1 mode=fl acc=0.98 fpr=0.03 tpr=0.99 tnr=0.97 ...``
        """
        pairs = [("run_id", self.run_id), ("mode", self.mode)]
        pairs += [(k, _number(getattr(self.metrics, k))) for k in RATE_KEYS]
        if self.threshold is not None:
            pairs.append(("tr", _number(self.threshold.tr)))
        pairs.append(("wall_seconds", _number(self.wall_seconds)))
        pairs.append(("manifest", self.manifest_hash or "n/a"))
        return " ".join("{}={}".format(k, v) for k, v in pairs)

    def write(self, run_dir):
        """
        Write ``report.txt``, ``metrics.line`` and ``threshold.txt`` into
        ``run_dir``.
        """
        makedirs(run_dir, exist_ok=True)
        with open(path.join(run_dir, REPORT_NAME), "w") as f:
            self.to_parser().write(f)
        with open(path.join(run_dir, METRICS_LINE_NAME), "w") as f:
            f.write(self.metrics_line() + "\n")
        if self.threshold is not None:
            write_threshold(self.threshold, path.join(run_dir, THRESHOLD_NAME))
        logger.info("Wrote the %s report to %s", self.mode, run_dir)

    @classmethod
    def read(cls, report_path):
        """
        :param report_path: str

        A ``report.txt`` file, or the run directory that holds one.

        :return: ``RunReport``

        :raises: ``DataError``

        If the file is missing or not a run report.
        """
        if path.isdir(report_path):
            report_path = path.join(report_path, REPORT_NAME)
        if not path.isfile(report_path):
            raise DataError("No run report at {}".format(report_path))
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read(report_path)
            run = parser["run"]
            rates = {k: _parse_number(parser["metrics"][k]) for k in RATE_KEYS}
        except (configparser.Error, KeyError, ValueError) as e:
            raise DataError("{} is not a run report: {}".format(report_path, e))

        confusion = None
        if "tp" in parser["metrics"]:
            confusion = ConfusionMatrix(**{
                k: int(parser["metrics"][k]) for k in ("tp", "tn", "fp", "fn")
            })
        comm = None
        if parser.has_section("comm"):
            section = parser["comm"]
            comm = CommStats(
                bytes_up=int(section["bytes_up"]), bytes_down=int(section["bytes_down"]),
                comm_seconds=float(section["comm_seconds"]),
                compute_seconds=float(section["compute_seconds"]),
                server_seconds=float(section["server_seconds"]),
            )
        curves = parser["loss_curve"] if parser.has_section("loss_curve") else {}
        per_device = {}
        for name in parser.sections():
            if name.startswith("device."):
                section = parser[name]
                per_device[name[len("device."):]] = (
                    Metrics(**{k: _parse_number(section[k]) for k in RATE_KEYS}),
                    _parse_number(section["tr"]),
                )
        return cls(
            run_id=run["run_id"], mode=run["mode"], config=dict(parser["config"]),
            metrics=Metrics(**rates),
            threshold=read_threshold_section(parser["threshold"])
            if parser.has_section("threshold") else None,
            confusion=confusion, comm=comm,
            loss_curve=_parse_floats(curves.get("loss", "")),
            eval_curve=_parse_floats(curves.get("eval_mse", "")),
            lr_curve=_parse_floats(curves.get("lr", "")),
            wall_seconds=_parse_number(run["wall_seconds"]),
            dataset=dict(parser["dataset"]) if parser.has_section("dataset") else {},
            per_device=per_device, created_at=run.get("created_at", ""),
        )

def parse_metrics_line(line):
    """
    :return: ``dict``

    The pairs of a ``metrics.line``. Rates and timings become ``float`` (or
    ``None`` for ``n/a``); everything else stays a string.

    :raises: ``ValueError``

    If a token is not of the form ``key=value``.
    """
    parsed = {}
    for token in line.split():
        key, sep, value = token.partition("=")
        if not sep or not key:
            raise ValueError("Malformed metrics token {!r}".format(token))
        if key in RATE_KEYS + ("tr", "wall_seconds"):
            value = _parse_number(value)
        parsed[key] = value
    return parsed

def threshold_section(threshold):
    return {
        "tr": _number(threshold.tr), "mean_mse": _number(threshold.mean_mse),
        "std_mse": _number(threshold.std_mse), "alpha": _number(threshold.alpha),
        "n_samples": str(threshold.n_samples),
    }

def read_threshold_section(section):
    return DetectionThreshold(
        tr=float(section["tr"]), mean_mse=float(section["mean_mse"]),
        std_mse=float(section["std_mse"]), alpha=float(section["alpha"]),
        n_samples=int(section["n_samples"]),
    )

def write_threshold(threshold, file_path):
    makedirs(path.dirname(file_path) or ".", exist_ok=True)
    parser = configparser.ConfigParser(interpolation=None)
    parser["threshold"] = threshold_section(threshold)
    with open(file_path, "w") as f:
        parser.write(f)

def read_threshold(file_path):
    """
    :raises: ``DataError``

    If the file is missing or malformed.
    """
    parser = configparser.ConfigParser(interpolation=None)
    if not parser.read(file_path) or not parser.has_section("threshold"):
        raise DataError("No threshold in {}".format(file_path))
    try:
        return read_threshold_section(parser["threshold"])
    except (KeyError, ValueError) as e:
        raise DataError("Malformed threshold file {}: {}".format(file_path, e))

def model_file_name(device_id=None):
    return MODEL_NAME if device_id is None else "model.{}.bin".format(device_id)

def threshold_file_name(device_id=None):
    return THRESHOLD_NAME if device_id is None else "threshold.{}.txt".format(device_id)

def save_model(model, file_path):
    makedirs(path.dirname(file_path) or ".", exist_ok=True)
    with open(file_path, "wb") as f:
        f.write(encode_model(model))

def load_model(file_path, model_config):
    """
    :return: ``ModelParams``

    :raises: ``DataError``

    If the file does not exist. Malformed contents raise the wire errors.
    """
    if not path.isfile(file_path):
        raise DataError("No model at {}".format(file_path))
    with open(file_path, "rb") as f:
        return decode_model(f.read(), model_config)

def manifest_warnings(reports):
    """
    :return: ``list[str]``

    One line per report whose dataset manifest differs from the first one.
    """
    if not reports:
        return []
    reference = reports[0]
    return [
        "{} ({}) used dataset manifest {} but {} used {}".format(
            r.run_id, r.mode, r.manifest_hash or "n/a", reference.run_id,
            reference.manifest_hash or "n/a"
        )
        for r in reports[1:] if r.manifest_hash != reference.manifest_hash
    ]

def performance_table(reports):
    """
    :return: ``pd.DataFrame``

    One row per report, columns Acc / FPR / TPR / TNR, rows ordered
    CL-Single, CL-Combined, FL-FedDetect.
    """
    order = list(MODE_LABELS)
    ranked = sorted(reports, key=lambda r: order.index(r.mode) if r.mode in order else len(order))
    rows = [{
        "Method": MODE_LABELS.get(r.mode, r.mode), "Acc": format_rate(r.metrics.acc),
        "FPR": format_rate(r.metrics.fpr), "TPR": format_rate(r.metrics.tpr),
        "TNR": format_rate(r.metrics.tnr),
    } for r in ranked]
    return pd.DataFrame(rows, columns=["Method", "Acc", "FPR", "TPR", "TNR"])

def timing_table(reports):
    """
    :return: ``pd.DataFrame``

    End-to-end time and the communication / computation split of every
    report that recorded communication statistics.
    """
    rows = []
    for r in reports:
        if r.comm is None:
            continue
        comm_ratio, compute_ratio = r.comm.ratios()
        rows.append({
            "Run": r.run_id, "End-to-end (s)": "{:.2f}".format(r.wall_seconds),
            "Communication": format_rate(comm_ratio), "Computation": format_rate(compute_ratio),
            "Server hold (s)": "{:.2f}".format(r.comm.server_seconds),
            "Bytes up": r.comm.bytes_up, "Bytes down": r.comm.bytes_down,
        })
    return pd.DataFrame(rows, columns=[
        "Run", "End-to-end (s)", "Communication", "Computation", "Server hold (s)",
        "Bytes up", "Bytes down"
    ])

def render_tables(reports):
    """
    :return: ``str``

    The performance table, the timing table (if any run has one) and a
    warning line per mismatched dataset manifest.
    """
    if not reports:
        raise DataError("No reports to compare")
    parts = [performance_table(reports).to_string(index=False)]
    timing = timing_table(reports)
    if not timing.empty:
        parts.append(timing.to_string(index=False))
    for warning in manifest_warnings(reports):
        logger.warning(warning)
        parts.append("WARNING: " + warning)
    return "\n\n".join(parts)
