"""FasteNet saliency-map fastener detector."""
