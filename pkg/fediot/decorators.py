"""
decorators.py

A decorator is a function that wraps and replaces another function. If there's
a functionality that you wish to extend to multiple commands, you should
probably add the functionality as a decorator.

https://click.palletsprojects.com/en/8.1.x/commands/#decorating-commands

"""

import sys
from dataclasses import fields
from functools import wraps

import click

from .error import report_error
from .models.config import ExperimentConfig, MODES, DATASETS, TRANSPORTS, PROFILES
from .models.exception import FedIoTException
from .models.federation_model import LOCAL_OPTIMIZERS
from .models.nn_model import ACTIVATIONS

CHOICES = {
    "mode": MODES, "dataset": DATASETS, "transport": TRANSPORTS, "activation": ACTIVATIONS,
    "local_optimizer": LOCAL_OPTIMIZERS, "profile": tuple(PROFILES),
}
CLICK_TYPES = {int: click.INT, float: click.FLOAT}
HELP = {
    "encoder_rates": "Comma separated encoder shrink rates, e.g. 0.75,0.5,0.33,0.25",
    "latency": "Injected delay in seconds per delivered message (loopback only)",
    "broker_addr": "host:port of the message broker",
    "cache_dir": "Prepared dataset directory (default: <data-root>/prepared/<dataset>)",
    "n_devices": "Number of synthetic devices, or the first N N-BaIoT devices",
    "run_id": "Name of the run directory under --output-dir",
}
OPTION_FIELDS = tuple(f.name for f in fields(ExperimentConfig))

def _field_option(config_field):
    flag = "--" + config_field.name.replace("_", "-")
    help_text = HELP.get(config_field.name)
    if config_field.name in CHOICES:
        return click.option(
            flag, config_field.name, type=click.Choice(CHOICES[config_field.name]),
            default=None, help=help_text
        )
    if config_field.type is bool:
        return click.option(
            "{}/--no-{}".format(flag, flag[2:]), config_field.name, default=None, help=help_text
        )
    return click.option(
        flag, config_field.name, type=CLICK_TYPES.get(config_field.type, click.STRING),
        default=None, help=help_text
    )

def experiment_options(f):
    """
    Add one command line flag per :py:class:`ExperimentConfig` field, plus
    ``--config`` for an INI file. Flags left out stay ``None`` so that they do
    not override the profile or the file.

    :param f: ``function``

    A click command callback.

    :return: ``function``

    ``f`` with the options attached.
    """
    for config_field in reversed(fields(ExperimentConfig)):
        f = _field_option(config_field)(f)
    return click.option(
        "--config", "config_file", type=click.Path(dir_okay=False), default=None,
        help="INI file with [experiment], [model], [federation] and [transport] sections"
    )(f)

def with_experiment_config(f):
    """
    Collapse the flags added by :py:func:`experiment_options` into one
    ``ExperimentConfig``, passed as the first positional argument.

    :raises: ``ConfigError``

    If the merged values do not validate.
    """
    @wraps(f)
    def decorated_function(*args, **kwargs):
        overrides = {name: kwargs.pop(name) for name in OPTION_FIELDS}
        config_file = kwargs.pop("config_file")
        config = ExperimentConfig.from_sources(config_file=config_file, overrides=overrides)
        return f(config, *args, **kwargs)
    return decorated_function

def reports_errors(f):
    """
    Exit with the error's own code when a ``FedIoTException`` escapes the
    command, instead of printing a traceback.
    """
    @wraps(f)
    def decorated_function(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except FedIoTException as e:
            ctx = click.get_current_context(silent=True)
            if ctx is not None and (ctx.find_root().obj or {}).get("json_errors"):
                e.jsonify = True
            sys.exit(report_error(e))
    return decorated_function
