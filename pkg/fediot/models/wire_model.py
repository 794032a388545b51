"""
wire_model.py

Byte layouts shared by every transport backend.

WireModel (a serialized ``ModelParams``)::

    "FDIO" | version u8 | fingerprint 8B | layer_count u16
    | (out_dim u32, in_dim u32) * layer_count
    | float64 weights (row-major) then bias, layer by layer

Envelope frame::

    length u32 | topic_len u16 | topic | msg_type u8 | round u32
    | sender_len u8 | sender | payload_len u32 | payload

All integers and floats are little-endian. Decoding ``encode_model(m)`` gives
back ``m`` bit for bit.

"""

import enum
import json
import struct
from dataclasses import dataclass

import numpy as np

from .exception import (
    TransportError, BadMagicError, VersionMismatchError, TruncatedPayloadError,
    FingerprintMismatchError, ShapeMismatchError
)
from .anomaly_model import DetectionThreshold
from .nn_model import ModelParams

MODEL_MAGIC = b"FDIO"
MODEL_VERSION = 1
MODEL_HEADER = struct.Struct("<4sB8sH")
LAYER_HEADER = struct.Struct("<II")

FRAME_LENGTH = struct.Struct("<I")
MAX_FRAME_BYTES = 64 * 1024 * 1024

GLOBAL_MODEL_PREFIX = struct.Struct("<ddd")
MODEL_UPDATE_PREFIX = struct.Struct("<dd")
THRESHOLD_PAYLOAD = struct.Struct("<ddddI")
JSON_LENGTH = struct.Struct("<I")

class MsgType(enum.IntEnum):
    REGISTER = 1
    REGISTER_ACK = 2
    DATASET_ASSIGN = 3
    GLOBAL_MODEL = 4
    MODEL_UPDATE = 5
    MSE_SEQUENCE = 6
    GLOBAL_THRESHOLD = 7
    DONE = 8
    # broker control, never routed to subscribers
    SUBSCRIBE = 64

@dataclass
class Envelope:
    """
    One message. ``sent_at`` and ``received_at`` are local monotonic
    timestamps and never go on the wire.
    """
    topic: str
    msg_type: MsgType
    round: int
    sender_id: str
    payload: bytes = b""
    sent_at: float = 0.0
    received_at: float = None

    @property
    def key(self):
        """Deliveries with the same key are duplicates"""
        return (self.sender_id, self.round, int(self.msg_type))

def encode_model(model):
    """
    :param model: ModelParams

    :return: ``bytes``

    The WireModel layout described at the top of this module.
    """
    parts = [MODEL_HEADER.pack(
        MODEL_MAGIC, MODEL_VERSION, model.config_fingerprint, len(model.layers)
    )]
    for w, _ in model.layers:
        parts.append(LAYER_HEADER.pack(w.shape[0], w.shape[1]))
    for w, b in model.layers:
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)

def encoded_model_size(layer_dims):
    """
    :return: ``int``

    Byte length of a WireModel for the given chain of widths.
    """
    pairs = list(zip(layer_dims[:-1], layer_dims[1:]))
    n_values = sum(o * i + o for i, o in pairs)
    return MODEL_HEADER.size + LAYER_HEADER.size * len(pairs) + 8 * n_values

def decode_model(data, config):
    """
    :param data: bytes

    :param config: AutoencoderConfig

    The architecture the receiver expects.

    :return: ``ModelParams``

    :raises: ``BadMagicError``, ``VersionMismatchError``,
    ``TruncatedPayloadError``, ``FingerprintMismatchError``, ``ShapeMismatchError``
    """
    data = bytes(data)
    if len(data) < len(MODEL_MAGIC) or data[:len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise BadMagicError("Model payload does not start with {!r}".format(MODEL_MAGIC))
    if len(data) < MODEL_HEADER.size:
        raise TruncatedPayloadError("Model payload is too short for its header")
    _, version, fingerprint, layer_count = MODEL_HEADER.unpack_from(data)
    if version != MODEL_VERSION:
        raise VersionMismatchError("Model payload version {} (expected {})".format(
            version, MODEL_VERSION
        ))
    offset = MODEL_HEADER.size
    if len(data) < offset + LAYER_HEADER.size * layer_count:
        raise TruncatedPayloadError("Model payload is too short for its layer table")
    shapes = []
    for _ in range(layer_count):
        shapes.append(LAYER_HEADER.unpack_from(data, offset))
        offset += LAYER_HEADER.size

    expected = offset + 8 * sum(o * i + o for o, i in shapes)
    if len(data) < expected:
        raise TruncatedPayloadError("Model payload is {} bytes, header declares {}".format(
            len(data), expected
        ))
    if len(data) > expected:
        raise TransportError("Model payload has {} trailing bytes".format(len(data) - expected))
    if fingerprint != config.fingerprint:
        raise FingerprintMismatchError(
            "Model fingerprint {} does not match the expected architecture {}".format(
                fingerprint.hex(), config.fingerprint.hex()
            )
        )
    dims = config.layer_dims
    expected_shapes = [(o, i) for i, o in zip(dims[:-1], dims[1:])]
    if [tuple(s) for s in shapes] != expected_shapes:
        raise ShapeMismatchError("Model layers {} do not match the expected layers {}".format(
            shapes, expected_shapes
        ))

    layers = []
    for out_dim, in_dim in shapes:
        w = np.frombuffer(data, dtype="<f8", count=out_dim * in_dim, offset=offset)
        offset += 8 * out_dim * in_dim
        b = np.frombuffer(data, dtype="<f8", count=out_dim, offset=offset)
        offset += 8 * out_dim
        layers.append((
            w.reshape(out_dim, in_dim).astype(np.float64), b.astype(np.float64)
        ))
    return ModelParams(
        layers=layers, config_fingerprint=fingerprint, activation=config.activation,
        output_activation=config.output_activation
    )

def encode_frame(envelope):
    """
    :return: ``bytes``

    The length-prefixed frame for ``envelope``.
    """
    topic = envelope.topic.encode("utf-8")
    sender = envelope.sender_id.encode("utf-8")
    if not topic:
        raise TransportError("Cannot publish to an empty topic")
    if len(topic) > 0xFFFF or len(sender) > 0xFF:
        raise TransportError("Topic or sender id too long")
    body = b"".join([
        struct.pack("<H", len(topic)), topic,
        struct.pack("<BI", int(envelope.msg_type), envelope.round),
        struct.pack("<B", len(sender)), sender,
        struct.pack("<I", len(envelope.payload)), envelope.payload,
    ])
    return FRAME_LENGTH.pack(len(body)) + body

def decode_frame_body(body):
    """
    :param body: bytes

    A frame without its 4-byte length prefix.

    :return: ``Envelope``

    :raises: ``TruncatedPayloadError``

    If the declared lengths do not add up to ``len(body)``.
    """
    try:
        (topic_len,) = struct.unpack_from("<H", body, 0)
        offset = 2
        topic = body[offset:offset + topic_len].decode("utf-8")
        offset += topic_len
        msg_type, round_t = struct.unpack_from("<BI", body, offset)
        offset += 5
        (sender_len,) = struct.unpack_from("<B", body, offset)
        offset += 1
        sender = body[offset:offset + sender_len].decode("utf-8")
        offset += sender_len
        (payload_len,) = struct.unpack_from("<I", body, offset)
        offset += 4
    except (struct.error, UnicodeDecodeError) as e:
        raise TruncatedPayloadError("Malformed envelope header: {}".format(e))
    if offset + payload_len != len(body):
        raise TruncatedPayloadError("Envelope declares a {}-byte payload but carries {}".format(
            payload_len, len(body) - offset
        ))
    try:
        msg_type = MsgType(msg_type)
    except ValueError:
        raise TransportError("Unknown message type {}".format(msg_type))
    return Envelope(
        topic=topic, msg_type=msg_type, round=round_t, sender_id=sender,
        payload=bytes(body[offset:])
    )

def frame_size(envelope):
    return FRAME_LENGTH.size + 2 + len(envelope.topic.encode("utf-8")) + 5 + 1 \
        + len(envelope.sender_id.encode("utf-8")) + 4 + len(envelope.payload)

def encode_global_model(model, lr, hold_seconds=0.0, aggregation_seconds=0.0):
    return GLOBAL_MODEL_PREFIX.pack(lr, hold_seconds, aggregation_seconds) + encode_model(model)

def decode_global_model(payload, config):
    """
    :return: ``tuple(ModelParams, float, float, float)``

    Model, learning rate, server hold seconds, aggregation seconds.
    """
    if len(payload) < GLOBAL_MODEL_PREFIX.size:
        raise TruncatedPayloadError("GLOBAL_MODEL payload is too short")
    lr, hold, aggregation = GLOBAL_MODEL_PREFIX.unpack_from(payload)
    return decode_model(payload[GLOBAL_MODEL_PREFIX.size:], config), lr, hold, aggregation

def encode_model_update(model, local_loss, train_seconds):
    return MODEL_UPDATE_PREFIX.pack(local_loss, train_seconds) + encode_model(model)

def decode_model_update(payload, config):
    """
    :return: ``tuple(ModelParams, float, float)``

    Model, local loss, train seconds.
    """
    if len(payload) < MODEL_UPDATE_PREFIX.size:
        raise TruncatedPayloadError("MODEL_UPDATE payload is too short")
    loss, seconds = MODEL_UPDATE_PREFIX.unpack_from(payload)
    return decode_model(payload[MODEL_UPDATE_PREFIX.size:], config), loss, seconds

def encode_json(obj):
    return json.dumps(obj, sort_keys=True).encode("utf-8")

def decode_json(payload):
    try:
        return json.loads(bytes(payload).decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as e:
        raise TransportError("Malformed JSON payload: {}".format(e))

def encode_mse_sequence(scores, client_stats):
    meta = encode_json(client_stats)
    scores = np.ascontiguousarray(scores, dtype="<f8")
    return JSON_LENGTH.pack(len(meta)) + meta + scores.tobytes()

def decode_mse_sequence(payload):
    """
    :return: ``tuple(np.ndarray, dict)``
    """
    if len(payload) < JSON_LENGTH.size:
        raise TruncatedPayloadError("MSE_SEQUENCE payload is too short")
    (meta_len,) = JSON_LENGTH.unpack_from(payload)
    start = JSON_LENGTH.size + meta_len
    if len(payload) < start or (len(payload) - start) % 8:
        raise TruncatedPayloadError("MSE_SEQUENCE payload has a ragged score vector")
    stats = decode_json(payload[JSON_LENGTH.size:start])
    scores = np.frombuffer(payload, dtype="<f8", offset=start).astype(np.float64)
    return scores, stats

def encode_threshold(threshold):
    return THRESHOLD_PAYLOAD.pack(
        threshold.tr, threshold.mean_mse, threshold.std_mse, threshold.alpha, threshold.n_samples
    )

def decode_threshold(payload):
    if len(payload) != THRESHOLD_PAYLOAD.size:
        raise TruncatedPayloadError("GLOBAL_THRESHOLD payload has the wrong size")
    tr, mean, std, alpha, n = THRESHOLD_PAYLOAD.unpack(payload)
    return DetectionThreshold(tr=tr, mean_mse=mean, std_mse=std, alpha=alpha, n_samples=n)
