from .records import (
    NONE,
    SLOTS,
    Center,
    ConditionSet,
    Corpus,
    Dataset,
    DuplicateId,
    MalformedLine,
    Paragraph,
    ReactionRecord,
    RetroLabel,
    UnparseableSmiles,
    ensure_dir,
    load_corpus,
    load_reactions,
    load_sources,
    load_templates,
    save_corpus,
    save_reactions,
    save_sources,
    save_templates,
)
from .splits import (
    RCR_TIME_SPLIT,
    RETRO_TIME_SPLIT,
    DatasetSplit,
    EmptyDataset,
    EmptySplitPart,
    make_random_split,
    make_time_split,
)
from .synthetic import InvalidParams, SyntheticParams, check_synthetic, generate_synthetic, template_table
from .vocab import (
    SPECIALS,
    Vocabs,
    build_vocabs,
    chem_input_tokens,
    retro_target_tokens,
    smiles_tokens,
    tokenize_text,
)
