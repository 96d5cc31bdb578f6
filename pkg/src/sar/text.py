"""Token vocabularies shared by the text-reading models."""
PAD = "<pad>"
UNK = "<unk>"


def normalize(tokens):
    """Lowercase and split a trailing ``?`` into its own token."""
    out = []
    for tok in tokens:
        tok = tok.lower()
        if len(tok) > 1 and tok.endswith("?"):
            out.extend((tok[:-1], "?"))
        else:
            out.append(tok)
    return out


class TokenVocab:
    def __init__(self, tokens):
        self.tokens = [PAD, UNK] + sorted(set(tokens) - {PAD, UNK})
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, TokenVocab) and self.tokens == other.tokens

    def encode(self, tokens):
        unk = self.index[UNK]
        return [self.index.get(t, unk) for t in normalize(tokens)]

    @classmethod
    def from_list(cls, tokens):
        v = cls([])
        v.tokens = list(tokens)
        v.index = {t: i for i, t in enumerate(v.tokens)}
        return v
