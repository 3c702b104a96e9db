# Trainer module
