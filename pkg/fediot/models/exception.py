"""
exception.py

Errors raised by the FedIoT models. Every error carries the exit code that the
command line reports, so that scripts driving experiments can tell a bad config 
from missing data or a dead broker.

"""

import logging

logger = logging.getLogger(__name__)

EXIT_GENERIC = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRANSPORT = 4
EXIT_DIVERGENCE = 5

class FedIoTException(Exception):
    """
    A special exception for errors that arise due to constraints that we set on 
    the experiment, for instance, a device directory may be missing, a client 
    may not report back before the round deadline, etc.

    :param message: str

    human readable string explaining the problem

    :kwarg exit_code: int

    The process exit code used when the exception reaches the command line.

    :kwarg jsonify: bool

    Set the ``jsonify`` attribute of the exception. The error handler can then 
    check this value to decide whether to also print a machine readable dict.

    """

    exit_code = EXIT_GENERIC

    def __init__(self, message, exit_code=None, jsonify=False):
        Exception.__init__(self, message)
        self.message = message
        self.jsonify = jsonify
        if exit_code is not None:
            self.exit_code = exit_code

    def to_dict(self):
        """
        :return: ``dict``

        A dict representation of the exception
        
        """
        return {
            "success": False, "message": self.message, 
            "error": type(self).__name__, "exit_code": self.exit_code
        }

class ConfigError(FedIoTException):
    """Invalid experiment, model or federation settings."""
    exit_code = EXIT_CONFIG

class DataError(FedIoTException):
    """Missing, malformed or insufficient input data."""
    exit_code = EXIT_DATA

class TransportError(FedIoTException):
    """Broker unreachable, clients missing, or malformed frames."""
    exit_code = EXIT_TRANSPORT

class DivergenceError(FedIoTException):
    """Training produced a non-finite loss or parameter."""
    exit_code = EXIT_DIVERGENCE

class BadMagicError(TransportError):
    pass

class VersionMismatchError(TransportError):
    pass

class TruncatedPayloadError(TransportError):
    pass

class FingerprintMismatchError(TransportError):
    pass

class ShapeMismatchError(TransportError):
    pass

def validate_values(data_obj, constraints, error_class=ConfigError):
    """
    Helper function for validating settings

    :param data_obj: dict

    A key-value pairing that needs to be validated. Values are replaced by 
    their cast versions.

    :param constraints: list[tuple]

    Each tuple has 5 items. In order, they are: key (str), 
    cast_function (function), l_limit (value), u_limit (value), error_msg (str)

    :kwarg error_class: type

    The ``FedIoTException`` subclass to raise.

    :raises: ``FedIoTException``

    If any of the keys don't exist or any of the values fail to meet the 
    constraint.

    """
    for key, cast_function, l_limit, u_limit, error_msg in constraints:
        try:
            data_obj[key] = cast_function(data_obj[key])
            if l_limit is not None: assert data_obj[key] >= l_limit
            if u_limit is not None: assert data_obj[key] <= u_limit
        except (KeyError, TypeError, ValueError, AssertionError):
            logger.debug("Validation failed for %s=%r", key, data_obj.get(key))
            raise error_class("{} (got {!r})".format(error_msg, data_obj.get(key)))
