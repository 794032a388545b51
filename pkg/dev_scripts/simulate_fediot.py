"""
simulate_fediot.py

Write a fake N-BaIoT tree to disk and push it through every mode, to help in
debugging the ingestion path and the report tables without the real 2 GB
dataset.

"""

import sys
sys.path.insert(0, "..")

import tempfile
from os import makedirs, path

import pandas as pd
from click.testing import CliRunner

import fediot
from fediot.models import data_model

def feature_names(n_features=data_model.N_FEATURES):
    return ["feature_{:03d}".format(i) for i in range(n_features)]

def write_fake_nbaiot(root, n_devices=2, seed=0, layout="flat", benign_rows=None,
                      attack_rows=600, n_features=data_model.N_FEATURES, shifted_features=None):
    """
    :param root: str

    Directory that will hold one sub-directory per device.

    :kwarg layout: str

    ``flat`` writes ``<device>/benign.csv`` and ``<device>/<family>.<type>.csv``.
    ``published`` writes ``<device>/benign_traffic.csv`` and
    ``<device>/<family>_attacks/<type>.csv``, like the public download.

    :return: ``list[str]``

    The device ids that were written, taken from the N-BaIoT catalogue.
    """
    corpus = data_model.generate_synthetic_corpus(
        n_devices, seed, n_features=n_features, benign_rows=benign_rows,
        attack_rows_per_type=attack_rows, shifted_features=shifted_features
    )
    columns = feature_names(n_features)
    device_ids = []
    for i, raw in enumerate(corpus):
        device_id = data_model.NBAIOT_DEVICES[i % len(data_model.NBAIOT_DEVICES)]
        device_dir = path.join(root, device_id)
        makedirs(device_dir, exist_ok=True)
        benign_name = "benign.csv" if layout == "flat" else "benign_traffic.csv"
        pd.DataFrame(raw.benign, columns=columns).to_csv(
            path.join(device_dir, benign_name), index=False
        )
        for attack_id, rows in raw.attacks.items():
            family, attack_type = attack_id.split(".")
            if layout == "flat":
                file_path = path.join(device_dir, "{}.csv".format(attack_id))
            else:
                attack_dir = path.join(device_dir, "{}_attacks".format(family))
                makedirs(attack_dir, exist_ok=True)
                file_path = path.join(attack_dir, "{}.csv".format(attack_type))
            pd.DataFrame(rows, columns=columns).to_csv(file_path, index=False)
        device_ids.append(device_id)
    return device_ids

def main(workdir=None, n_devices=2):
    workdir = workdir or tempfile.mkdtemp(prefix="fediot-")
    data_root = path.join(workdir, "data")
    output_dir = path.join(workdir, "runs")
    write_fake_nbaiot(data_root, n_devices=n_devices, layout="published")
    print("Wrote a fake N-BaIoT tree to {}".format(data_root))

    app = fediot.create_app()
    runner = CliRunner()
    common = [
        "--dataset", "nbaiot", "--data-root", data_root, "--output-dir", output_dir,
        "--n-devices", str(n_devices), "--total-rounds", "2", "--local-epochs", "1",
    ]
    for args in (["prepare-data"], ["train", "--mode", "cl-single"],
                 ["train", "--mode", "cl-combined"], ["train", "--mode", "fl"]):
        result = runner.invoke(app, args + common)
        print(result.output)
        if result.exit_code != 0:
            raise SystemExit(result.exit_code)

    run_dirs = [
        path.join(output_dir, "{}-nbaiot-seed0".format(mode))
        for mode in ("cl-single", "cl-combined", "fl")
    ]
    print(runner.invoke(app, ["report"] + run_dirs).output)

if __name__ == "__main__":
    main()
