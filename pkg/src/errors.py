"""Exception hierarchy shared by every module."""


class NomaHandoverError(Exception):
    """Base class for all errors raised by this package."""


# crypto


class MalformedIdentity(NomaHandoverError):
    pass


class InvalidScalar(NomaHandoverError):
    pass


class WrongKeyRole(NomaHandoverError):
    pass


class MalformedCiphertext(NomaHandoverError):
    pass


class AuthFailure(NomaHandoverError):
    """AEAD tag did not verify: wrong key, tampered bytes, or channel bit errors."""


class Layer1AuthFailure(AuthFailure):
    pass


class Layer2AuthFailure(AuthFailure):
    pass


# ledger


class LedgerError(NomaHandoverError):
    pass


class DuplicateKey(LedgerError):
    pass


class DuplicateId(LedgerError):
    pass


class MalformedRecord(LedgerError):
    pass


class NotFound(LedgerError):
    pass


# phy


class PhyError(NomaHandoverError):
    pass


class InvalidAllocation(PhyError):
    pass


class LengthMismatch(PhyError):
    pass


class InvalidConfig(PhyError):
    pass


# protocol and reporting


class ProtocolError(NomaHandoverError):
    pass


class MissingResults(NomaHandoverError):
    pass


# configuration


class ConfigError(NomaHandoverError):
    pass


class ParseError(ConfigError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        location = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{location}")


class ValidationError(ConfigError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")
