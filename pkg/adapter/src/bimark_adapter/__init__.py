"""Client bridge from an LLM inference loop to a watermark serve endpoint.

The adapter reimplements no watermark math. It speaks the newline-delimited
JSON protocol of ``bimark serve`` and exposes the reweighting step as a
logits-processor-style hook: ``(input probabilities, preceding ids) ->
output probabilities``. One normative implementation of the distribution
transform lives server-side; this client just moves bytes.
"""

__version__ = "0.1.0"

from .session import (
    BridgeSession,
    ProtocolError,
    SocketTransport,
    StdioTransport,
    ValidationError,
    open_session,
    watermark_hook,
)
