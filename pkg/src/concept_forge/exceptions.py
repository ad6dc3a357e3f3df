"""Exception hierarchy shared by every pipeline stage."""


class ConceptForgeError(Exception):
    """Base class for all library errors."""


class ParseError(ConceptForgeError, ValueError):
    def __init__(self, message, line_no=None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class OffsetError(ParseError):
    pass


class NegativeScore(ParseError):
    pass


class UnmappedConcept(ConceptForgeError, KeyError):
    pass


class UnknownConcept(ConceptForgeError, KeyError):
    pass


class PoolExhausted(ConceptForgeError):
    pass


class ZeroVector(ConceptForgeError, ValueError):
    pass


class NonFiniteLoss(ConceptForgeError, FloatingPointError):
    def __init__(self, batch_id, loss):
        self.batch_id = batch_id
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} in batch {batch_id}")


class DegenerateInput(ConceptForgeError, ValueError):
    pass


class MissingPredictions(ConceptForgeError, KeyError):
    def __init__(self, doc_ids):
        self.doc_ids = sorted(doc_ids)
        super().__init__(f"no predictions for documents: {', '.join(self.doc_ids)}")
