# Prompt-Tuning Lab Modules
