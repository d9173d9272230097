class WattlineError(Exception):
    """Base class for every error raised by wattline"""


class ConfigError(WattlineError):
    """Configuration file or flags failed validation"""


class ContractError(WattlineError, ValueError):
    """A caller violated an operation's preconditions"""


class CollectionError(WattlineError):
    """A node collector could not read its source at all"""


class ExpositionError(WattlineError):
    """Text exposition could not be rendered or parsed"""


class RenderError(ExpositionError):
    """A metric or label name is not valid for exposition"""


class ParseError(ExpositionError):
    """Malformed exposition text"""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class RuleGenerationError(WattlineError):
    """A recording rule could not be generated for a profile"""


class EmissionFactorNotFoundError(WattlineError, KeyError):
    """Region missing from the static emission factor table"""

    def __init__(self, region: str, known: list[str]):
        super().__init__(
            f"no emission factor for region {region!r}; known regions: {', '.join(known) or 'none'}"
        )
        self.region = region
        self.known = known

    def __str__(self) -> str:
        return self.args[0]


class EmissionsUnavailableError(WattlineError):
    """Neither the real-time provider nor a static fallback produced a factor"""


class IngestError(WattlineError):
    """An ingest run had to abort"""


class TSDBUnavailableError(WattlineError):
    """The TSDB did not answer after all retries"""


class InspectionError(WattlineError):
    """A query could not be tokenized (unbalanced braces or quotes)"""


class BackendUnavailableError(WattlineError):
    """No healthy TSDB backend is available"""


class GenerationError(WattlineError):
    """The cluster simulator could not write its output"""


class BackupError(WattlineError):
    """A registry snapshot could not be written"""


class RegistryUnavailableError(WattlineError):
    """The gate could not answer an ownership check"""
