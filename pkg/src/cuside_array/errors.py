""" Exceptions raised by the cuside_array package.

PEP8 naming: every exception class ends in ``Error``. Catch ``CusideError`` to handle anything
raised deliberately by this package.
"""


class CusideError(Exception):
    """ Base class for errors raised by this package. """


class ShapeError(CusideError, ValueError):
    """ Array or tensor shapes do not agree. """


class SignalError(CusideError):
    """ Waveform, STFT or feature extraction failure. """


class InputTooShortError(SignalError):
    """ The signal is shorter than one analysis window. """


class NotColaError(SignalError):
    """ The window/hop pair does not satisfy constant-overlap-add. """


class WavFormatError(SignalError):
    """ A WAV file is not 16-bit PCM at the expected sample rate. """


class SceneError(CusideError):
    """ Scene synthesis failure. """


class ZeroPowerError(SceneError):
    """ Speech or noise has zero power at the reference channel. """


class ChunkingError(CusideError):
    """ Invalid chunk geometry. """


class ContextPolicyError(ChunkingError):
    """ A context policy requests a mode its stage does not allow. """


class BeamformerError(CusideError):
    """ MVDR beamformer failure. """


class SingularCovarianceError(BeamformerError):
    """ The loaded noise covariance of a frequency bin cannot be inverted. """

    def __init__(self, bin_index: int, condition: float):
        super().__init__(f"noise covariance singular at bin {bin_index} "
                         f"(condition {condition:.3e})")
        self.bin_index = bin_index
        self.condition = condition


class NonFiniteError(BeamformerError):
    """ NaN or Inf found where finite values are required. """


class CtcInfeasibleError(CusideError):
    """ The label sequence cannot be aligned to the number of frames. """

    def __init__(self, num_frames: int, required: int):
        super().__init__(f"CTC needs at least {required} frames, got {num_frames}")
        self.num_frames = num_frames
        self.required = required


class CheckpointError(CusideError):
    """ A checkpoint is corrupt or belongs to another architecture. """


class EmptyReferenceError(CusideError):
    """ CER requested over references with no tokens. """


class LatencyError(CusideError):
    """ A stream event violates the algorithmic latency formula. """


class DatasetError(CusideError):
    """ A manifest or dataset directory is malformed. """


class VerificationError(CusideError):
    """ A registered verification check did not hold. """
