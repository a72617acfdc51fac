PROG_NAME = "hlm"
CONFIG_PATH_ENV_VAR = "HLM_CONFIG_PATH"
DEFAULT_CONFIG_FN = "default_config.yml"
DEFAULT_SYNONYMS_FN = "synonyms.tsv"
RESOLVED_CONFIG_FN = "config.resolved.yml"
METRICS_FN = "metrics.jsonl"
TOKENIZER_FN = "tokenizer.bpe"
CHECKPOINT_FN = "checkpoint.hlm"

TOKENIZER_HEADER = "HLM-BPE v1"
CHECKPOINT_MAGIC = b"HLM1"
CHECKPOINT_VERSION = 1

PAD, MASK, UNK, BOS = "<pad>", "<mask>", "<unk>", "<bos>"
SPECIAL_TOKENS = (PAD, MASK, UNK, BOS)
PAD_ID, MASK_ID, UNK_ID, BOS_ID = range(len(SPECIAL_TOKENS))

# tanh approximation of GELU: sqrt(2 / pi)
GELU_SQRT_2_OVER_PI = 0.7978845608028654
GELU_CUBIC = 0.044715

HISTOGRAM_BINS = 40
