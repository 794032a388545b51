"""
config.py

The central source for variables that span the entire application. As a rule of 
thumb, if you find yourself using `os.environ`, you should probably include the 
variable here instead.

Expected environment variables (all optional): ``FEDIOT_DATA_ROOT``, 
``FEDIOT_OUTPUT_DIR``, ``FEDIOT_LOG_LEVEL``, ``FEDIOT_BROKER_ADDR``

An experiment is described by an :py:class:`ExperimentConfig`. Its values come 
from a profile, then an optional INI file, then command line flags, each layer 
overriding the previous one.

"""

import configparser
import logging
from dataclasses import dataclass, field, fields, asdict, replace
from os import environ, path

from .exception import ConfigError, validate_values
from .nn_model import AutoencoderConfig, LrSchedule, ACTIVATIONS
from .federation_model import FederationConfig, LOCAL_OPTIMIZERS

DATA_ROOT = environ.get("FEDIOT_DATA_ROOT", "data")
OUTPUT_DIR = environ.get("FEDIOT_OUTPUT_DIR", "runs")
LOG_LEVEL = environ.get("FEDIOT_LOG_LEVEL", "INFO")
BROKER_ADDR = environ.get("FEDIOT_BROKER_ADDR", "127.0.0.1:1883")

N_FEATURES = 115

MODES = ("fl", "cl-single", "cl-combined")
DATASETS = ("nbaiot", "synthetic")
TRANSPORTS = ("loopback", "tcp")

# Recorded instead of "paper" when a pinned value was overridden
CUSTOM_PROFILE = "custom"

PROFILES = {
    "paper": {
        "total_rounds": 30, "local_epochs": 120, "batch_size": 64, 
        "alpha": 3.0, "activation": "tanh"
    },
    "fast": {
        "total_rounds": 5, "local_epochs": 5, "batch_size": 64, 
        "alpha": 3.0, "activation": "tanh"
    },
}

# INI section each key lives in
SECTIONS = {
    "experiment": (
        "mode", "dataset", "data_root", "cache_dir", "n_devices", "seed", 
        "output_dir", "profile", "run_id"
    ),
    "model": ("encoder_rates", "activation", "output_activation"),
    "federation": (
        "total_rounds", "local_epochs", "batch_size", "lr_max", "lr_min", 
        "alpha", "local_optimizer"
    ),
    "transport": (
        "transport", "broker_addr", "latency", "registration_timeout", 
        "round_timeout"
    ),
}

def _parse_bool(value):
    if isinstance(value, bool):
        return value
    lowered = str(value).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(value)

def _parse_rates(value):
    if isinstance(value, str):
        return tuple(float(x) for x in value.split(",") if x.strip())
    return tuple(float(x) for x in value)

@dataclass(frozen=True)
class ExperimentConfig:
    """
    Everything needed to reproduce one experiment. Together with the dataset 
    manifest hashes, a snapshot of this object is the provenance recorded in 
    every run report.
    """
    mode: str = "fl"
    dataset: str = "synthetic"
    data_root: str = DATA_ROOT
    cache_dir: str = ""
    n_devices: int = 9
    seed: int = 0
    output_dir: str = OUTPUT_DIR
    profile: str = "fast"
    run_id: str = ""

    encoder_rates: tuple = (0.75, 0.50, 0.33, 0.25)
    activation: str = "tanh"
    output_activation: bool = True

    total_rounds: int = 5
    local_epochs: int = 5
    batch_size: int = 64
    lr_max: float = 1e-3
    lr_min: float = 0.0
    alpha: float = 3.0
    local_optimizer: str = "adam"

    transport: str = "loopback"
    broker_addr: str = BROKER_ADDR
    latency: float = 0.0
    registration_timeout: float = 60.0
    round_timeout: float = 3600.0

    _casts = {
        "n_devices": int, "seed": int, "encoder_rates": _parse_rates, 
        "output_activation": _parse_bool, "total_rounds": int, 
        "local_epochs": int, "batch_size": int, "lr_max": float, 
        "lr_min": float, "alpha": float, "latency": float, 
        "registration_timeout": float, "round_timeout": float,
    }

    @classmethod
    def from_sources(cls, profile="fast", config_file=None, overrides=None):
        """
        :kwarg profile: str

        One of the keys of ``PROFILES``. Supplies the starting values.
        A ``paper`` run that overrides any pinned value is recorded as
        ``custom``.

        :kwarg config_file: str

        Optional INI file with ``[experiment]``, ``[model]``, ``[federation]`` 
        and ``[transport]`` sections of ``key = value`` pairs.

        :kwarg overrides: dict

        Values from command line flags. ``None`` values are ignored.

        :return: ``ExperimentConfig``

        :raises: ``ConfigError``

        If the profile is unknown, the file has unknown keys, or any value 
        fails validation.
        """
        explicit = {}
        if config_file is not None:
            explicit.update(read_config_file(config_file))
        if overrides:
            explicit.update({k: v for k, v in overrides.items() if v is not None})
        profile = explicit.pop("profile", profile)

        if profile != CUSTOM_PROFILE and profile not in PROFILES:
            raise ConfigError("Unknown profile {}. Valid profiles: {}".format(
                profile, ", ".join(PROFILES)
            ))
        values = dict(PROFILES.get(profile, {}), profile=profile)
        values.update(explicit)

        config = cls.from_dict(values)
        if config.profile == "paper":
            changed = [
                key for key, pinned in PROFILES["paper"].items() if getattr(config, key) != pinned
            ]
            if changed:
                logging.getLogger(__name__).warning(
                    "%s override the paper profile, recording the run as %s",
                    ", ".join(changed), CUSTOM_PROFILE
                )
                config = replace(config, profile=CUSTOM_PROFILE)
        return config

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError("Unknown config keys: {}".format(", ".join(sorted(unknown))))
        values = dict(values)
        for key, cast in cls._casts.items():
            if key in values:
                try:
                    values[key] = cast(values[key])
                except (TypeError, ValueError):
                    raise ConfigError("Cannot parse {} = {!r}".format(key, values[key]))
        config = cls(**values)
        config.validate()
        return config

    def validate(self):
        """
        :raises: ``ConfigError``

        If any value is out of range.
        """
        numbers = asdict(self)
        validate_values(numbers, [
            ("n_devices", int, 1, None, "n_devices must be at least 1"),
            ("seed", int, 0, 2 ** 64 - 1, "seed must be an unsigned 64-bit integer"),
            ("total_rounds", int, 1, None, "total_rounds must be at least 1"),
            ("local_epochs", int, 0, None, "local_epochs cannot be negative"),
            ("batch_size", int, 1, None, "batch_size must be at least 1"),
            ("lr_max", float, 0.0, None, "lr_max cannot be negative"),
            ("lr_min", float, 0.0, self.lr_max, "lr_min must lie in [0, lr_max]"),
            ("alpha", float, 0.0, None, "alpha cannot be negative"),
            ("latency", float, 0.0, None, "latency cannot be negative"),
            ("registration_timeout", float, 0.0, None, "registration_timeout cannot be negative"),
            ("round_timeout", float, 0.0, None, "round_timeout cannot be negative"),
        ])
        for key, allowed in (
                ("mode", MODES), ("dataset", DATASETS), ("transport", TRANSPORTS), 
                ("activation", ACTIVATIONS), ("local_optimizer", LOCAL_OPTIMIZERS)):
            if getattr(self, key) not in allowed:
                raise ConfigError("{} must be one of {} (got {!r})".format(
                    key, ", ".join(allowed), getattr(self, key)
                ))
        self.broker_host_port()
        # AutoencoderConfig checks the rates themselves
        self.autoencoder_config(N_FEATURES)

    def with_overrides(self, **overrides):
        config = replace(self, **overrides)
        config.validate()
        return config

    def resolved_cache_dir(self):
        """
        :return: ``str``

        ``cache_dir`` if set, else ``<data_root>/prepared/<dataset>``
        """
        if self.cache_dir:
            return self.cache_dir
        return path.join(self.data_root, "prepared", self.dataset)

    def broker_host_port(self):
        """
        :return: ``tuple(str, int)``

        :raises: ``ConfigError``

        If ``broker_addr`` is not of the form ``host:port``
        """
        host, _, port = self.broker_addr.rpartition(":")
        try:
            port = int(port)
            assert host and 0 <= port <= 65535
        except (ValueError, AssertionError):
            raise ConfigError("broker_addr must look like host:port (got {!r})".format(
                self.broker_addr
            ))
        return host, port

    def autoencoder_config(self, input_dim):
        return AutoencoderConfig(
            input_dim=input_dim, encoder_rates=tuple(self.encoder_rates),
            activation=self.activation, output_activation=self.output_activation,
            seed=self.seed
        )

    def schedule(self):
        return LrSchedule(
            eta_max=self.lr_max, eta_min=self.lr_min, total_rounds=self.total_rounds
        )

    def federation_config(self, n_clients):
        return FederationConfig(
            n_clients=n_clients, total_rounds=self.total_rounds, 
            local_epochs=self.local_epochs, batch_size=self.batch_size,
            schedule=self.schedule(), alpha=self.alpha, 
            local_optimizer=self.local_optimizer
        )

    def to_dict(self):
        """
        :return: ``dict``

        Flat str -> str mapping, suitable for INI files and run reports.
        """
        flat = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "encoder_rates":
                value = ",".join(repr(float(x)) for x in value)
            flat[f.name] = str(value)
        return flat

def read_config_file(config_file):
    """
    :param config_file: str

    Path to an INI file.

    :return: ``dict``

    The raw (string) values keyed by field name.

    :raises: ``ConfigError``

    If the file is missing or contains unknown sections or keys.
    """
    if not path.isfile(config_file):
        raise ConfigError("Config file {} does not exist".format(config_file))
    parser = configparser.ConfigParser()
    try:
        parser.read(config_file)
    except configparser.Error as e:
        raise ConfigError("Cannot parse {}: {}".format(config_file, e))

    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError("Unknown section [{}] in {}".format(section, config_file))
        for key, value in parser.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError("Unknown key {} in section [{}] of {}".format(
                    key, section, config_file
                ))
            values[key] = value
    return values

def write_config_file(config, config_file):
    """
    Persist ``config`` in the INI layout understood by :py:func:`read_config_file`
    """
    flat = config.to_dict()
    parser = configparser.ConfigParser()
    for section, keys in SECTIONS.items():
        parser[section] = {key: flat[key] for key in keys}
    with open(config_file, "w") as f:
        parser.write(f)

def configure_logging(level=None):
    """
    Install a single stream handler on the root logger. Safe to call twice.
    """
    level = level or LOG_LEVEL
    root = logging.getLogger()
    if not any(getattr(h, "_fediot", False) for h in root.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(
            "%(asctime)s %(levelname)s %(name)s: %(message)s"
        ))
        handler._fediot = True
        root.addHandler(handler)
    root.setLevel(level.upper() if isinstance(level, str) else level)
