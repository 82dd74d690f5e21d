# Artifact Codecs Package