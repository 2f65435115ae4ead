"""Synthetic five-toolset workspace for trying the pipeline without real data.

``python -m fical.demo OUTDIR`` writes manifests, one corpus per client and a
``config.toml`` that ``fical run --config OUTDIR/config.toml`` accepts.
"""

from __future__ import annotations

import argparse
import random
import sys
from pathlib import Path
from typing import Callable

from .domain import ClientDataset, ParameterSpec, ToolSpec, ToolUseInstance, dump_dataset

P = ParameterSpec

TOOLSETS: dict[str, list[ToolSpec]] = {
    "dogs": [
        ToolSpec("dogs", "dog_breed_info", "Temperament, size and grooming needs of a dog breed.",
                 (P("breed", "enum", allowed_values=("labrador", "poodle", "beagle", "husky", "boxer")),),
                 '{"breed": "{breed}", "temperament": "friendly", "grooming": "weekly"}'),
        ToolSpec("dogs", "dog_adoption_search", "Adoptable dogs at shelters in a city, filtered by maximum age.",
                 (P("city", "string"), P("max_age", "integer")),
                 '{"city": "{city}", "dogs": 4, "max_age": {max_age}}'),
        ToolSpec("dogs", "dog_food_calculator", "Daily food portion in grams for a dog of a given weight.",
                 (P("weight_kg", "number"), P("active", "boolean")),
                 '{"grams_per_day": 320, "weight_kg": {weight_kg}, "active": {active}}'),
    ],
    "weather": [
        ToolSpec("weather", "weather_current", "Current temperature and conditions for a city.",
                 (P("city", "string"), P("units", "enum", allowed_values=("metric", "imperial"))),
                 '{"city": "{city}", "units": "{units}", "conditions": "cloudy"}'),
        ToolSpec("weather", "weather_forecast", "Multi-day forecast of rain and temperature for a city.",
                 (P("city", "string"), P("days", "integer")),
                 '{"city": "{city}", "days": {days}, "rain_chance": 0.3}'),
        ToolSpec("weather", "weather_alerts", "Active storm, flood and heat warnings for a region.",
                 (P("region", "string"),),
                 '{"region": "{region}", "alerts": []}'),
    ],
    "books": [
        ToolSpec("books", "book_search", "Find published books matching a title.",
                 (P("title", "string"),),
                 '{"query": "{title}", "results": 3}'),
        ToolSpec("books", "book_author_works", "Bibliography of an author, newest first, up to a limit.",
                 (P("author", "string"), P("limit", "integer")),
                 '{"author": "{author}", "works": {limit}}'),
        ToolSpec("books", "book_reviews", "Reader ratings and review snippets for a book by ISBN.",
                 (P("isbn", "string"),),
                 '{"isbn": "{isbn}", "rating": 4.2}'),
    ],
    "currency": [
        ToolSpec("currency", "currency_convert", "Convert an amount of US dollars into another currency.",
                 (P("amount", "number"), P("target", "enum", allowed_values=("eur", "jpy", "gbp", "chf"))),
                 '{"amount": {amount}, "target": "{target}", "rate": 0.92}'),
        ToolSpec("currency", "currency_history", "Exchange rate history of a currency over recent days.",
                 (P("code", "enum", allowed_values=("eur", "jpy", "gbp", "chf")), P("days", "integer")),
                 '{"code": "{code}", "days": {days}, "trend": "flat"}'),
        ToolSpec("currency", "currency_list", "Currencies in circulation within a geographic region.",
                 (P("region", "string"),),
                 '{"region": "{region}", "currencies": ["eur"]}'),
    ],
    "recipes": [
        ToolSpec("recipes", "recipe_search", "Recipes using an ingredient that cook within a time limit.",
                 (P("ingredient", "string"), P("max_minutes", "integer")),
                 '{"ingredient": "{ingredient}", "recipes": 5, "max_minutes": {max_minutes}}'),
        ToolSpec("recipes", "recipe_nutrition", "Calories and macronutrients of a dish for a number of servings.",
                 (P("dish", "string"), P("servings", "integer")),
                 '{"dish": "{dish}", "servings": {servings}, "kcal": 540}'),
        ToolSpec("recipes", "recipe_substitute", "Replacement options for an ingredient, optionally vegan.",
                 (P("ingredient", "string"), P("vegan", "boolean")),
                 '{"ingredient": "{ingredient}", "vegan": {vegan}, "options": 2}'),
    ],
}

TOOLSET_IDS = tuple(TOOLSETS)

CITIES = ["Lisbon", "Osaka", "Denver", "Nairobi", "Oslo", "Lima", "Hanoi", "Perth", "Quebec", "Tunis"]
REGIONS = ["Andes", "Balkans", "Sahel", "Patagonia", "Scandinavia", "Caribbean", "Deccan", "Outback"]
TITLES = ["Silent Harbor", "The Glass Orchard", "Winter Cartography", "Small Engines", "Paper Comets"]
AUTHORS = ["Mara Voss", "Teo Lindqvist", "Ines Okafor", "Ravi Castell", "June Abara"]
INGREDIENTS = ["chickpeas", "spinach", "butter", "eggs", "mushrooms", "lentils", "salmon", "honey"]
DISHES = ["shakshuka", "risotto", "pad thai", "minestrone", "paella", "dal"]

Gen = Callable[[random.Random], tuple[str, dict]]


def _yes_no(value: bool) -> str:
    return "yes" if value else "no"


def _dogs_breed(r):
    breed = r.choice(TOOLSETS["dogs"][0].parameters[0].allowed_values)
    text = r.choice([
        f"What is the temperament of a {breed}?",
        f"Is a {breed} a good breed for a family, and how much grooming does it need?",
        f"Describe the {breed} breed size and character.",
    ])
    return text, {"breed": breed}


def _dogs_adopt(r):
    city, age = r.choice(CITIES), r.randint(1, 9)
    text = r.choice([
        f'Which shelters in "{city}" have dogs up to {age} years old for adoption?',
        f'I want to adopt a dog in "{city}", no older than {age} years.',
        f'Search adoptable shelter dogs near "{city}" aged {age} or younger.',
    ])
    return text, {"city": city, "max_age": age}


def _dogs_food(r):
    kg, active = r.randint(4, 45), r.random() < 0.5
    text = r.choice([
        f"How many grams of food per day for a {kg} kg dog? active: {_yes_no(active)}.",
        f"Daily feeding portion for my dog weighing {kg} kg, active {_yes_no(active)}.",
    ])
    return text, {"weight_kg": kg, "active": active}


def _weather_now(r):
    city, units = r.choice(CITIES), r.choice(["metric", "imperial"])
    text = r.choice([
        f'What is the temperature right now in "{city}"? Use {units} units.',
        f'Current weather conditions for "{city}" in {units}.',
    ])
    return text, {"city": city, "units": units}


def _weather_forecast(r):
    city, days = r.choice(CITIES), r.randint(2, 10)
    text = r.choice([
        f'Will it rain in "{city}" over the next {days} days? Forecast please.',
        f'Give me a {days} day forecast for "{city}".',
    ])
    return text, {"city": city, "days": days}


def _weather_alerts(r):
    region = r.choice(REGIONS)
    text = r.choice([
        f'Are there storm or flood warnings active for "{region}"?',
        f'Check heat alerts in the "{region}" region.',
    ])
    return text, {"region": region}


def _book_search(r):
    title = r.choice(TITLES)
    text = r.choice([
        f'Look for a book titled "{title}".',
        f'Is there a published novel called "{title}"?',
    ])
    return text, {"title": title}


def _book_author(r):
    author, limit = r.choice(AUTHORS), r.randint(3, 12)
    text = r.choice([
        f'List up to {limit} books written by author "{author}", newest first.',
        f'Show the bibliography of "{author}", at most {limit} works.',
    ])
    return text, {"author": author, "limit": limit}


def _book_reviews(r):
    isbn = "978" + "".join(str(r.randint(0, 9)) for _ in range(10))
    text = r.choice([
        f'What do readers say about the book with ISBN "{isbn}"? Ratings and reviews.',
        f'Review snippets for ISBN "{isbn}".',
    ])
    return text, {"isbn": isbn}


CODES = ("eur", "jpy", "gbp", "chf")


def _fx_convert(r):
    amount, target = r.randint(5, 900), r.choice(CODES)
    text = r.choice([
        f"Convert {amount} dollars into {target}.",
        f"How much is {amount} USD in {target} at today's exchange?",
    ])
    return text, {"amount": amount, "target": target}


def _fx_history(r):
    code, days = r.choice(CODES), r.randint(7, 90)
    text = r.choice([
        f"Show the exchange rate history of {code} for the past {days} days.",
        f"How has {code} moved over the last {days} days?",
    ])
    return text, {"code": code, "days": days}


def _fx_list(r):
    region = r.choice(REGIONS)
    text = r.choice([
        f'Which currencies circulate in "{region}"?',
        f'What money is used across the "{region}" region?',
    ])
    return text, {"region": region}


def _recipe_search(r):
    ing, minutes = r.choice(INGREDIENTS), r.choice([15, 20, 30, 45, 60])
    text = r.choice([
        f'Find recipes with "{ing}" that cook in under {minutes} minutes.',
        f'Quick dinner ideas using "{ing}", {minutes} minutes max.',
    ])
    return text, {"ingredient": ing, "max_minutes": minutes}


def _recipe_nutrition(r):
    dish, servings = r.choice(DISHES), r.randint(1, 6)
    text = r.choice([
        f'How many calories are in "{dish}" for {servings} servings?',
        f'Nutrition facts, macros and calories, of "{dish}" serving {servings}.',
    ])
    return text, {"dish": dish, "servings": servings}


def _recipe_sub(r):
    ing, vegan = r.choice(INGREDIENTS), r.random() < 0.5
    text = r.choice([
        f'What can I use instead of "{ing}"? vegan: {_yes_no(vegan)}.',
        f'Suggest a replacement for "{ing}" in baking, vegan {_yes_no(vegan)}.',
    ])
    return text, {"ingredient": ing, "vegan": vegan}


GENERATORS: dict[str, Gen] = {
    "dog_breed_info": _dogs_breed,
    "dog_adoption_search": _dogs_adopt,
    "dog_food_calculator": _dogs_food,
    "weather_current": _weather_now,
    "weather_forecast": _weather_forecast,
    "weather_alerts": _weather_alerts,
    "book_search": _book_search,
    "book_author_works": _book_author,
    "book_reviews": _book_reviews,
    "currency_convert": _fx_convert,
    "currency_history": _fx_history,
    "currency_list": _fx_list,
    "recipe_search": _recipe_search,
    "recipe_nutrition": _recipe_nutrition,
    "recipe_substitute": _recipe_sub,
}


def make_client(
    client_id: str, toolset_ids: list[str], n_instances: int = 60, seed: int = 0
) -> ClientDataset:
    rng = random.Random(f"{seed}:{client_id}")
    tools = [t for ts in toolset_ids for t in TOOLSETS[ts]]
    instances = []
    for n in range(n_instances):
        tool = tools[n % len(tools)]
        text, args = GENERATORS[tool.tool_name](rng)
        instances.append(ToolUseInstance(f"{client_id}-{n + 1:04d}", text, tool.tool_name, args))
    return ClientDataset(client_id, tuple(toolset_ids), tuple(instances), tuple(tools))


CONFIG_TEMPLATE = """\
[experiment]
output_dir = "out"
{clients}
[llm]
mode = "mock"

[tlu]
dim = 64
k = 8
budget = 2048

[federation]
transport = "simulated"

[eval]
seed = {seed}
split_fraction = 0.2

[baseline]
param_count = 13000000
bytes_per_param = 4
rounds = 50
"""


def write_workspace(
    out_dir: str | Path,
    clients: int = 5,
    toolsets_per_client: int = 1,
    instances: int = 60,
    seed: int = 0,
) -> Path:
    """Write corpora, manifests and config.toml; return the config path."""
    if not 1 <= toolsets_per_client <= len(TOOLSET_IDS):
        raise ValueError(f"toolsets_per_client must be in 1..{len(TOOLSET_IDS)}")
    out = Path(out_dir)
    data = out / "data"
    data.mkdir(parents=True, exist_ok=True)
    blocks = []
    for i in range(clients):
        cid = f"c{i + 1}"
        assigned = [TOOLSET_IDS[(i + j) % len(TOOLSET_IDS)] for j in range(toolsets_per_client)]
        dump_dataset(make_client(cid, assigned, instances, seed), data / f"{cid}.jsonl")
        toolsets = ", ".join(f'"{t}"' for t in assigned)
        blocks.append(f'\n[[clients]]\nclient_id = "{cid}"\ndataset = "data/{cid}.jsonl"\ntoolsets = [{toolsets}]\n')
    config = out / "config.toml"
    config.write_text(CONFIG_TEMPLATE.format(clients="".join(blocks), seed=seed), encoding="utf-8")
    return config


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="python -m fical.demo", description=__doc__.splitlines()[0])
    ap.add_argument("out_dir")
    ap.add_argument("--clients", type=int, default=5)
    ap.add_argument("--toolsets-per-client", type=int, default=1)
    ap.add_argument("--instances", type=int, default=60)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    path = write_workspace(args.out_dir, args.clients, args.toolsets_per_client, args.instances, args.seed)
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
