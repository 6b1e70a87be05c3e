"""Exceptions for the mars_ratio package"""


class RatioObjectiveException(Exception):
    """Personalised exception for ratio objectives and the training toolkit"""
    def __init__(self, message):
        self.__message = message
        super().__init__(self.message)

    @property
    def message(self):
        """gets the message value"""
        return self.__message

    @message.setter
    def message(self, value):
        self.__message = value


class RatioDomainException(RatioObjectiveException):
    """Raised when an argument lies outside the domain of an operation"""


class InvalidInputException(RatioObjectiveException):
    """Raised on non-finite values or mismatched shapes"""


class UnsupportedVariantException(RatioObjectiveException):
    """Raised when an operation is requested for a variant that has no such notion"""


class ConfigValidationException(RatioObjectiveException):
    """Raised when a run configuration or artifact cannot be accepted"""


class NumericInstabilityException(RatioObjectiveException):
    """Raised when a training loss becomes non-finite.

    The diagnostics dictionary describes the update that failed.
    """
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
