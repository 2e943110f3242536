"""Exception taxonomy.

Categories are deliberately distinct so callers can count, log, and surface
authentication failures separately from malformed input, and so the CLI can
emit machine-parsable error categories. Every exception carries a short
``category`` slug.
"""

from __future__ import annotations


class EmberError(Exception):
    category = "error"


class PreconditionError(EmberError, ValueError):
    """An argument violated a documented precondition (bad length, empty
    plaintext, non-successor version, ...)."""

    category = "validation"


class AuthenticationError(EmberError):
    """A cryptographic tag or MAC did not verify. Distinct from malformed
    input: the bytes were well-formed but not authentic."""

    category = "auth-failure"


class MalformedInputError(EmberError):
    """Input bytes were structurally invalid before any cryptographic
    processing."""

    category = "malformed"


class ParseError(MalformedInputError):
    category = "parse"


class StructuralError(MalformedInputError):
    category = "structural"


class UnsupportedVersionError(MalformedInputError):
    category = "unsupported-version"


class OversizeError(MalformedInputError):
    category = "oversize"


class TruncationError(MalformedInputError):
    category = "truncation"


class NotFoundError(EmberError):
    category = "not-found"


class DuplicateError(EmberError):
    category = "duplicate"


class VersionSequenceError(EmberError):
    """Key version installed out of order (gap or regression)."""

    category = "version-sequence"


class UndecryptableHistoryError(EmberError):
    """The key version a record was encrypted under has been evicted."""

    category = "undecryptable-history"


class WrongMasterKeyError(AuthenticationError):
    category = "wrong-master-key"


class SchemaVersionError(EmberError):
    """Store file written by a newer format version; refuse rather than
    destroy."""

    category = "schema-version"


class CorruptStoreError(EmberError):
    category = "corrupt-store"


class StoreClosedError(EmberError):
    category = "store-closed"


class RotationBusyError(EmberError):
    """A rotation is already in flight for this conversation."""

    category = "rotation-busy"


class RotationProtocolError(EmberError):
    """A rotation message arrived in a phase or shape the FSM rejects."""

    category = "rotation-protocol"


class TransportError(EmberError):
    category = "transport"
