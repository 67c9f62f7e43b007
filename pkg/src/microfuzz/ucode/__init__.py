from .model import (  # noqa: F401
    MicroOpWord,
    Op,
    SequenceWord,
    Sync,
    Triad,
    UcodeImage,
    decode_uop,
    encode_uop,
)
from .asm import assemble, disassemble  # noqa: F401
