"""Reserved token ids shared by the tokenizer, the model, and the decoders."""

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
EA_TAG_ID = 4
EB_TAG_ID = 5
ASP_TAG_ID = 6
OPN_TAG_ID = 7

PAD = "[PAD]"
BOS = "[BOS]"
EOS = "[EOS]"
UNK = "[UNK]"
EA_TAG = "[EA]"
EB_TAG = "[EB]"
ASP_TAG = "[ASP]"
OPN_TAG = "[OPN]"

RESERVED = (PAD, BOS, EOS, UNK, EA_TAG, EB_TAG, ASP_TAG, OPN_TAG)
