"""Exception hierarchy shared by every ctxshap module."""


class CtxShapError(Exception):
    """Base class for all ctxshap errors."""


# model ingestion / evaluation
class SchemaError(CtxShapError):
    """A document has missing, extra or mistyped fields."""


class StructureError(CtxShapError):
    """A tree node table is not a proper binary tree."""


class InvalidValueError(CtxShapError, ValueError):
    """A numeric field holds a value outside its domain (NaN, negative cover, ...)."""


class WidthError(CtxShapError):
    """Input width does not match the model's feature count."""


class EmptyBackgroundError(CtxShapError):
    pass


class CoverageError(CtxShapError):
    """A left-routing fraction is needed but undefined (node never reached by background)."""


# attribution
class TooManyFeaturesError(CtxShapError):
    pass


class EmptyInputError(CtxShapError):
    pass


# prompt assembly / parsing
class UnknownFeatureError(CtxShapError):
    pass


class BudgetTooSmallError(CtxShapError):
    pass


class KindArityError(CtxShapError):
    pass


class FormatError(CtxShapError):
    """An LLM response does not follow the mandated section format.

    ``section`` names the first missing, duplicated or empty section.
    """

    def __init__(self, section: str, detail: str = ""):
        self.section = section
        super().__init__(section if not detail else f"{section}: {detail}")


# gateway
class GatewayError(CtxShapError):
    pass


class AuthError(GatewayError):
    pass


class RateLimitError(GatewayError):
    pass


class TransportError(GatewayError):
    pass


class UpstreamError(GatewayError):
    pass


class FixtureMissError(GatewayError):
    def __init__(self, key: str):
        self.key = key
        super().__init__(f"no replay fixture for bundle {key}")


class MissingPriceError(CtxShapError):
    pass
