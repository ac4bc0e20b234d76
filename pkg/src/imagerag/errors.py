"""Exception types shared across the engine."""


class ImageRagError(Exception):
    """Base class for all engine errors."""


class IndexFormatError(ImageRagError):
    """Vector file or metadata sidecar violates the index format."""


class TransportError(ImageRagError):
    """A remote client failed after exhausting its retry budget."""


class VlmProtocolError(ImageRagError):
    """The VLM answered, but the answer cannot be parsed.

    Carries the raw response so callers can log or surface it.
    """

    def __init__(self, message: str, raw_response: str = ""):
        super().__init__(message)
        self.raw_response = raw_response


class VlmRefusalError(VlmProtocolError):
    """The VLM refused or produced nothing usable; retryable at a higher temperature."""


class CapabilityError(ImageRagError):
    """A request exceeds what the target generation backend supports."""


class ConfigError(ImageRagError):
    """Invalid configuration, profile, or CLI usage."""


class PipelineError(ImageRagError):
    """A pipeline stage failed hard; the partial trace has been persisted."""
