"""Exception hierarchy shared by every voiprelay module."""


class VoipRelayError(Exception):
    """Base class for all errors raised by this package."""


# configuration ------------------------------------------------------------

class ConfigError(VoipRelayError, ValueError):
    pass


class MissingFlag(ConfigError):
    def __init__(self, name):
        super().__init__(f"missing required flag {name}")
        self.name = name


class DuplicateFlag(ConfigError):
    def __init__(self, name):
        super().__init__(f"flag {name} given more than once")
        self.name = name


class MalformedValue(ConfigError):
    def __init__(self, flag, text):
        super().__init__(f"malformed value for {flag}: {text!r}")
        self.flag = flag
        self.text = text


class UnknownFlag(ConfigError):
    def __init__(self, name):
        super().__init__(f"unrecognized argument {name}")
        self.name = name


class NonPositive(ConfigError):
    def __init__(self, field):
        super().__init__(f"{field} must be positive")
        self.field = field


# storage ------------------------------------------------------------------

class BadStorageUrl(ConfigError):
    pass


class BadScheme(BadStorageUrl):
    pass


class EmptyBucket(BadStorageUrl):
    pass


class UnknownCorpus(VoipRelayError, LookupError):
    def __init__(self, label):
        super().__init__(f"unknown source corpus {label!r}")
        self.label = label


# audio --------------------------------------------------------------------

class AudioError(VoipRelayError):
    pass


class NotFound(AudioError, FileNotFoundError):
    pass


class NotRiff(AudioError):
    pass


class UnsupportedEncoding(AudioError):
    pass


class IoFailure(VoipRelayError, OSError):
    pass


class FrameTooLarge(AudioError, ValueError):
    pass


class MixedStreams(AudioError, ValueError):
    pass


class LengthMismatch(AudioError, ValueError):
    pass


# transport ----------------------------------------------------------------

class TransportError(VoipRelayError):
    pass


class Timeout(TransportError, TimeoutError):
    def __init__(self, timeout_ms):
        super().__init__(f"no answer within {timeout_ms} ms")
        self.timeout_ms = timeout_ms


class Refused(TransportError):
    pass


class ResolutionFailure(TransportError):
    pass


class CallNotEstablished(TransportError):
    pass


class FileUnreadable(TransportError):
    pass


# provisioning -------------------------------------------------------------

class ProvisionError(VoipRelayError):
    pass


class DuplicateKey(ProvisionError):
    pass


class DuplicateGroup(ProvisionError):
    pass


class QuotaExceeded(ProvisionError):
    def __init__(self, requested, in_use, limit):
        super().__init__(f"vCPU quota exceeded: {in_use} in use + {requested} requested > {limit}")
        self.requested = requested
        self.in_use = in_use
        self.limit = limit


class ConnectTimeout(ProvisionError, TimeoutError):
    pass


class InjectedFault(VoipRelayError):
    """Raised by the fault injector in place of a real infrastructure failure."""

    def __init__(self, step):
        super().__init__(f"injected fault at {step}")
        self.step = step


# orchestration ------------------------------------------------------------

class EmptySource(VoipRelayError):
    pass


class MissingCleanPair(VoipRelayError):
    def __init__(self, name):
        super().__init__(f"no clean counterpart for {name}")
        self.name = name


class NoSource(VoipRelayError):
    pass
