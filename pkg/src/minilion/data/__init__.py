from .bbox import BBox, BBoxParseError, parse_bbox, serialize_bbox
from .scenes import (
    COLORS,
    SHAPES,
    SUBTYPES,
    DataConfig,
    Dataset,
    InstructionSample,
    SyntheticScene,
    build_samples,
    gen_scene,
    generate_dataset,
    read_samples,
    scene_features,
    tag_provider,
    write_samples,
)
from .templates import (
    EVAL_INSTRUCTIONS,
    HINT_MARKER,
    TEMPLATES,
    TemplateError,
    render_tag_instruction,
    render_template,
)
from .tokenizer import BOS, EOS, HINT, PAD, Tokenizer, UnknownCharacterError
