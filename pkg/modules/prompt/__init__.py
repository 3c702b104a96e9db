# Prompt space module
