"""
clean_runs.py

Utility script for deleting run directories and prepared dataset caches. Useful
when the cache format or the report layout changes.

"""

import sys
sys.path.insert(0, "..")

import shutil
from os import path

from fediot.models import config
from fediot.models.cache_model import DatasetCache

def clean_runs(output_dir=None, data_root=None):
    """
    Delete every run under ``output_dir`` and every prepared cache under
    ``data_root``.

    :return: ``list[str]``

    The directories that were removed.
    """
    output_dir = output_dir or config.OUTPUT_DIR
    data_root = data_root or config.DATA_ROOT
    removed = []
    if path.isdir(output_dir):
        shutil.rmtree(output_dir)
        removed.append(output_dir)
    for dataset in config.DATASETS:
        cache = DatasetCache(path.join(data_root, "prepared", dataset))
        if path.isdir(cache.cache_dir):
            cache.clear()
            removed.append(cache.cache_dir)
    return removed

if __name__ == "__main__":
    for directory in clean_runs():
        print("Removed {}".format(directory))
