"""Ember: a serverless two-party secure messenger.

Authenticated-encryption envelopes over length-prefixed TCP, a strict
verify-before-decrypt receive pipeline, ciphertext-only persistence with
TTL expiry, and a mutually confirmed HKDF key-rotation protocol, plus an
in-process adversarial harness, a CLI, and a loopback control API for the
browser client.
"""

__version__ = "0.1.0"
