"""Instrumentation client for wattledger collectors.

Drop-in usage inside a training script::

    from wattledger_client import ClientSession

    with ClientSession() as session:           # endpoint from $WATTLEDGER_ENDPOINT
        with session.stage("student_training"):
            for batch in loader:
                ...
                session.add_tokens(batch.token_count)

The client speaks the collector's newline-delimited JSON marker protocol over
a unix socket and has no dependencies beyond the standard library.
"""

from .session import (
    ENDPOINT_ENV_VAR,
    ClientError,
    ClientSession,
    DeliveryError,
    StageStateError,
)
from .wire import encode_marker, valid_stage_kind

__all__ = [
    "ENDPOINT_ENV_VAR",
    "ClientError",
    "ClientSession",
    "DeliveryError",
    "StageStateError",
    "encode_marker",
    "valid_stage_kind",
    "__version__",
]

__version__ = "0.1.0"
