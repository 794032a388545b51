"""
__init__.py

Serves two functions:

* Contains the application factory, which builds the ``fediot`` command line
  tool out of the commands exposed by ``data``, ``experiment`` and ``roles``
* Tells Python that the `fediot` directory should be treated as a package.

"""

import click

from .models.config import configure_logging
from . import data, experiment, roles

def create_app(test_config=None):
    """
    Create and configure the command line application. Register the commands of
    every controller module.

    :kwarg test_config: dict

    Optional settings stored on the click context, e.g. ``json_errors`` or
    ``log_level``, so that tests do not need to pass them as flags.

    :return: ``click.Group``

    The group acts as the central registry for the commands.

    """
    test_config = dict(test_config or {})

    @click.group(context_settings={"help_option_names": ["-h", "--help"]})
    @click.option("--log-level", default=None,
                  help="DEBUG, INFO, WARNING or ERROR (default: $FEDIOT_LOG_LEVEL or INFO)")
    @click.option("--json-errors", is_flag=True, default=None,
                  help="Also print errors as a JSON object on stdout")
    @click.pass_context
    def app(ctx, log_level, json_errors):
        """Federated autoencoder anomaly detection for IoT traffic."""
        ctx.ensure_object(dict)
        ctx.obj.update(test_config)
        if json_errors:
            ctx.obj["json_errors"] = True
        configure_logging(log_level or ctx.obj.get("log_level"))

    for module in (data, experiment, roles):
        for command in module.commands:
            app.add_command(command)
    return app
