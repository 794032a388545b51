"""
test_report_model.py
"""

import sys
from os import path

import pytest

sys.path.insert(0, "../..")
from fediot.models import report_model, nn_model
from fediot.models.anomaly_model import ConfusionMatrix, DetectionThreshold, Metrics
from fediot.models.report_model import RunReport
from fediot.models.transport_model import CommStats
from fediot.models.exception import DataError

def fl_report(**kwargs):
    values = dict(
        run_id="fl-synthetic-seed0", mode="fl", config={"seed": "0", "mode": "fl"},
        metrics=Metrics(acc=0.9827, fpr=0.0345, tpr=0.9999, tnr=0.9655),
        threshold=DetectionThreshold(tr=0.031, mean_mse=0.01, std_mse=0.007, alpha=3.0,
                                     n_samples=27000),
        confusion=ConfusionMatrix(tp=26997, tn=26068, fp=932, fn=3),
        comm=CommStats(bytes_up=1000, bytes_down=1200, comm_seconds=1.0, compute_seconds=3.0,
                       server_seconds=0.5),
        loss_curve=[0.3, 0.2], eval_curve=[0.25, 0.15], lr_curve=[1e-3, 0.0],
        wall_seconds=12.5, dataset={"name": "synthetic", "manifest_hash": "abc"},
    )
    values.update(kwargs)
    return RunReport(**values)

def test_write_and_read(tmp_path):
    run_dir = str(tmp_path / "run")
    original = fl_report()
    original.write(run_dir)
    for name in ("report.txt", "metrics.line", "threshold.txt"):
        assert path.isfile(path.join(run_dir, name))

    loaded = RunReport.read(run_dir)
    assert loaded.metrics == original.metrics
    assert loaded.threshold == original.threshold
    assert loaded.confusion == original.confusion
    assert loaded.comm.bytes_up == 1000 and loaded.comm.server_seconds == 0.5
    assert loaded.loss_curve == [0.3, 0.2]
    assert loaded.lr_curve == [1e-3, 0.0]
    assert loaded.config == original.config
    assert loaded.manifest_hash == "abc"
    assert report_model.read_threshold(path.join(run_dir, "threshold.txt")) == original.threshold

def test_cl_single_report_keeps_devices(tmp_path):
    report = RunReport(
        run_id="cl", mode="cl-single", config={}, metrics=Metrics(0.9, 0.1, None, 0.9),
        per_device={"Danmini_Doorbell": (Metrics(0.9, 0.1, None, 0.9), 0.02)},
    )
    report.write(str(tmp_path))
    loaded = RunReport.read(str(tmp_path / "report.txt"))
    assert loaded.metrics.tpr is None
    assert loaded.per_device["Danmini_Doorbell"][1] == 0.02
    assert loaded.threshold is None and loaded.comm is None
    assert not path.isfile(str(tmp_path / "threshold.txt"))

def test_read_errors(tmp_path):
    with pytest.raises(DataError, match="No run report"):
        RunReport.read(str(tmp_path))
    (tmp_path / "report.txt").write_text("[run]\nrun_id = x\n")
    with pytest.raises(DataError, match="not a run report"):
        RunReport.read(str(tmp_path))
    with pytest.raises(DataError):
        report_model.read_threshold(str(tmp_path / "missing.txt"))

def test_metrics_line():
    parsed = report_model.parse_metrics_line(fl_report().metrics_line())
    assert parsed["run_id"] == "fl-synthetic-seed0"
    assert parsed["acc"] == 0.9827
    assert parsed["tr"] == 0.031
    assert parsed["manifest"] == "abc"
    assert report_model.parse_metrics_line("acc=n/a")["acc"] is None
    with pytest.raises(ValueError):
        report_model.parse_metrics_line("acc")

def test_performance_table_order():
    reports = [
        fl_report(),
        fl_report(run_id="c", mode="cl-combined", metrics=Metrics(0.99, 0.01, 1.0, 0.99)),
        fl_report(run_id="s", mode="cl-single", metrics=Metrics(0.8, None, 0.7, None)),
    ]
    table = report_model.performance_table(reports)
    assert list(table["Method"]) == ["CL-Single", "CL-Combined", "FL-FedDetect"]
    assert list(table.columns) == ["Method", "Acc", "FPR", "TPR", "TNR"]
    assert table.iloc[0]["FPR"] == "n/a"
    assert table.iloc[2]["Acc"] == "98.27%"

def test_timing_table_and_render():
    timing = report_model.timing_table([fl_report(), fl_report(run_id="x", comm=None)])
    assert len(timing) == 1
    assert timing.iloc[0]["Communication"] == "25.00%"
    assert timing.iloc[0]["Computation"] == "75.00%"

    text = report_model.render_tables([
        fl_report(), fl_report(run_id="other", dataset={"manifest_hash": "def"})
    ])
    assert "FL-FedDetect" in text
    assert "Bytes up" in text
    assert "WARNING: other (fl) used dataset manifest def" in text
    with pytest.raises(DataError):
        report_model.render_tables([])

def test_save_and_load_model(tmp_path, toy_config):
    model = nn_model.init_autoencoder(toy_config)
    file_path = str(tmp_path / "nested" / report_model.model_file_name("Ennio_Doorbell"))
    report_model.save_model(model, file_path)
    assert path.getsize(file_path) == 87
    assert report_model.load_model(file_path, toy_config).bit_equal(model)
    with pytest.raises(DataError):
        report_model.load_model(str(tmp_path / "none.bin"), toy_config)
    assert report_model.threshold_file_name() == "threshold.txt"
    assert report_model.threshold_file_name("a") == "threshold.a.txt"
