"""Exception hierarchy.

Every error carries a short ``code`` so the CLI can print machine-parseable
``error_code: message`` lines.
"""


class RetouchError(Exception):
    code = "error"

    def __str__(self):
        return super().__str__() or self.code


class MissingFile(RetouchError, FileNotFoundError):
    code = "missing_file"


class SchemaViolation(RetouchError, ValueError):
    code = "schema_violation"

    def __init__(self, reason, row=None):
        self.row = row
        self.reason = reason
        msg = reason if row is None else f"row {row}: {reason}"
        super().__init__(msg)


class DuplicateSample(RetouchError, ValueError):
    code = "duplicate_sample"


class UnknownApp(RetouchError, KeyError):
    code = "unknown_app"


class MissingVariant(RetouchError, LookupError):
    code = "missing_variant"

    def __init__(self, subject, app):
        self.subject = subject
        self.app = app
        super().__init__(f"subject {subject!r} has no reference retouched with {app!r}")


class DegenerateLandmarks(RetouchError, ValueError):
    code = "degenerate_landmarks"


class NonZeroMeanFilter(RetouchError, ValueError):
    code = "non_zero_mean_filter"

    def __init__(self, index, total):
        self.index = index
        super().__init__(f"filter {index} sums to {total!r}, expected 0")


class ImageTooSmall(RetouchError, ValueError):
    code = "image_too_small"


class WrongCropSize(RetouchError, ValueError):
    code = "wrong_crop_size"


class BackendUnavailable(RetouchError):
    code = "backend_unavailable"


class MalformedOutput(RetouchError, ValueError):
    code = "malformed_output"


class MissingEntry(RetouchError, LookupError):
    code = "missing_entry"


class LengthMismatch(RetouchError, ValueError):
    code = "length_mismatch"


class KindMismatch(RetouchError, ValueError):
    code = "kind_mismatch"


class EmptyTrainingSet(RetouchError, ValueError):
    code = "empty_training_set"


class MixedKinds(RetouchError, ValueError):
    code = "mixed_kinds"


class SingleClass(RetouchError, ValueError):
    code = "single_class"


class VersionMismatch(RetouchError, ValueError):
    code = "version_mismatch"


class EncoderFailure(RetouchError):
    code = "encoder_failure"


class EmptyClass(RetouchError, ValueError):
    code = "empty_class"


class OutOfRange(RetouchError, ValueError):
    code = "out_of_range"


class IoError(RetouchError, OSError):
    code = "io_error"


class ConfigError(RetouchError, ValueError):
    code = "config_error"
