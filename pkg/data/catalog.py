import re

DRUGS = [
    'acetaminophen',
    'acetylsalicylic acid',
    'amodiaquine',
    'amoxicillin',
    'ampicillin',
    'artesunate',
    'azithromycin',
    'calcium carbonate',
    'chloramphenicol',
    'chloroquine',
    'ciprofloxacin',
    'corn starch',
    'DI water',
    'diethylcarbamazine',
    'dried wheat starch',
    'ethambutol',
    'isoniazid',
    'penicillin G',
    'potato starch',
    'primaquine',
    'quinine',
    'rifampicin',
    'streptomycin',
    'sulfadoxine',
    'talc',
    'tetracycline',
]

TIMER_AGENT = 'Ni/nioxime timer'

_NAMED_REAGENTS = [
    'ninhydrin test for primary amines',
    'biuret reagent',
    'acidic cobalt thiocyanate',
    'neutral cobalt thiocyanate',
    'copper test for beta lactam',
    'sodium nitroprusside',
    'napthaquinone sulfonate',
    'copper test for ethylenediamines',
    'iodine test for starch',
    'phenol test',
    'ferric ion',
]

REAGENTS = _NAMED_REAGENTS + [f'reagent-{i}' for i in range(len(_NAMED_REAGENTS) + 1, 25)]

# Panel slot value standing for the timer lane.
TIMER_LANE = -1

BLANK_DRUG = 'DI water'


def slug(name: str) -> str:
    return re.sub(r'[^a-z0-9]+', '-', name.lower()).strip('-')
