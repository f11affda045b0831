"""
Игрушечное обучение ViT:
- config: TrainConfig и SyntheticSpec
- synthetic: генерация синтетической задачи
- trainer: координатор обучения, извлечение признаков
"""
