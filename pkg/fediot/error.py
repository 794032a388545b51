"""
error.py

Turns a ``FedIoTException`` that reached the command line into a log line, an 
optional machine readable dict, and a process exit code.

"""

import json
import logging

import click

logger = logging.getLogger(__name__)

def report_error(fediot_exception):
    """
    :param fediot_exception: FedIoTException

    :return: ``int``

    The exit code the command should terminate with.
    """
    logger.error("%s: %s", type(fediot_exception).__name__, fediot_exception.message)
    if fediot_exception.jsonify:
        click.echo(json.dumps(fediot_exception.to_dict(), sort_keys=True))
    return fediot_exception.exit_code
