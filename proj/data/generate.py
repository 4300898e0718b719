#!/usr/bin/env python3
"""Regenerates general.txt and domain.txt.

general.txt mixes short passages on unrelated everyday topics. domain.txt is
a run of clinical visit notes with a narrow vocabulary. Both are synthetic
and deterministic for a given --seed.
"""

import argparse
import random
from pathlib import Path

GENERAL_TOPICS = {
    "weather": [
        "The morning was {adj} and the wind came from the {dir}.",
        "By noon the clouds had {verb} and the streets were {state}.",
        "Forecasters expected {amount} of rain over the {span}.",
        "Farmers in the {place} watched the sky and waited for {thing}.",
    ],
    "cooking": [
        "Chop the {veg} and warm the oil in a wide pan.",
        "Add a pinch of {spice} and stir until the sauce turns {color}.",
        "Let the {dish} rest for {count} minutes before serving.",
        "A good {dish} needs fresh {veg} and a little patience.",
    ],
    "travel": [
        "The train to {city} left at {hour} and was nearly empty.",
        "We walked along the {place} and stopped at a small {shop}.",
        "Tickets for the ferry cost {count} coins each way.",
        "The guide told us that {city} was founded by {people}.",
    ],
    "sports": [
        "The home team scored {count} goals in the second half.",
        "Their coach praised the {adj} defence after the match.",
        "Fans in {city} sang until the final whistle.",
        "The striker missed a {adj} chance early in the game.",
    ],
    "history": [
        "In the old records the town of {city} appears as a market for {thing}.",
        "Merchants carried {thing} across the {place} for many centuries.",
        "The {people} built walls around the harbour to keep out raiders.",
        "Few letters from that period survive, and most mention {thing}.",
    ],
    "gardening": [
        "Plant the {veg} seeds in rows about a hand apart.",
        "Water the beds early, before the sun turns {adj}.",
        "Snails love young {veg}, so check the leaves each evening.",
        "By late summer the {veg} were ready to harvest.",
    ],
    "music": [
        "The band opened with a {adj} song that nobody knew.",
        "She practised the {instrument} for {count} hours every day.",
        "The concert hall in {city} was full by {hour}.",
        "An old {instrument} hung on the wall above the stage.",
    ],
    "finance": [
        "The shop raised its prices by {count} percent this spring.",
        "Savings accounts paid very little interest that year.",
        "A small loan helped the bakery buy a new {thing}.",
        "Investors in {city} worried about the cost of {thing}.",
    ],
}

GENERAL_WORDS = {
    "adj": ["cold", "bright", "quiet", "heavy", "warm", "grey", "strange", "sharp", "gentle", "loud"],
    "dir": ["north", "south", "east", "west", "sea", "hills"],
    "verb": ["cleared", "thickened", "drifted away", "gathered", "broken up"],
    "state": ["wet", "crowded", "silent", "dusty", "bright"],
    "amount": ["a little", "plenty", "a great deal", "almost none"],
    "span": ["weekend", "coming week", "next few days", "whole month"],
    "place": ["valley", "river bank", "old quarter", "coast road", "plains", "harbour"],
    "thing": ["grain", "salt", "wool", "timber", "copper", "spices", "paper", "oil"],
    "veg": ["onions", "carrots", "beans", "tomatoes", "peppers", "leeks", "squash"],
    "spice": ["salt", "pepper", "cumin", "paprika", "thyme", "ginger"],
    "color": ["golden", "dark", "red", "thick", "glossy"],
    "dish": ["stew", "soup", "bread", "pie", "curry", "risotto"],
    "count": ["two", "three", "four", "five", "ten", "twelve", "twenty"],
    "city": ["Marlow", "Kesterby", "Port Anneth", "Ilford", "Dunmore", "Varesk"],
    "hour": ["six", "seven", "nine", "noon", "midnight"],
    "shop": ["bakery", "bookshop", "cafe", "market stall", "tailor"],
    "people": ["fishermen", "monks", "traders", "soldiers", "settlers"],
    "instrument": ["violin", "piano", "guitar", "flute", "drum"],
}

DOMAIN_SECTIONS = [
    ("Chief complaint", [
        "Patient reports {symptom} for the past {duration}.",
        "Presents with {symptom} and {symptom} since {onset}.",
        "Referred for evaluation of {symptom}.",
    ]),
    ("History", [
        "History of {condition} managed with {drug}.",
        "No prior {condition}. Family history of {condition}.",
        "Previously treated for {condition} with {drug} {dose}.",
        "Denies {symptom}. Reports {symptom} on exertion.",
    ]),
    ("Examination", [
        "Blood pressure {bp} mmHg, heart rate {hr} beats per minute.",
        "Temperature {temp} C, oxygen saturation {spo2} percent on room air.",
        "Lungs {lung}. Heart sounds {heart}.",
        "Abdomen {abdomen}. No peripheral oedema.",
    ]),
    ("Investigations", [
        "Haemoglobin {hb} g/dL, white cell count {wcc} x10^9/L.",
        "Creatinine {creat} umol/L, potassium {k} mmol/L.",
        "Chest radiograph shows {cxr}.",
        "ECG shows {ecg}.",
    ]),
    ("Assessment", [
        "Likely {condition}. Differential includes {condition}.",
        "Findings consistent with {condition}.",
        "{condition} is suspected; {condition} less likely.",
    ]),
    ("Plan", [
        "Start {drug} {dose} and review in {duration}.",
        "Continue {drug}. Repeat {test} in {duration}.",
        "Increase {drug} to {dose}. Advise {advice}.",
        "Refer to {service}. Patient advised to {advice}.",
    ]),
]

DOMAIN_WORDS = {
    "symptom": ["chest pain", "shortness of breath", "cough", "fever", "fatigue", "dizziness",
                "palpitations", "headache", "abdominal pain", "nausea", "leg swelling", "wheeze"],
    "duration": ["two days", "three days", "one week", "two weeks", "one month", "six weeks"],
    "onset": ["yesterday", "last week", "the weekend", "this morning", "the last admission"],
    "condition": ["hypertension", "type 2 diabetes", "asthma", "heart failure", "pneumonia",
                  "atrial fibrillation", "chronic kidney disease", "anaemia", "COPD", "angina"],
    "drug": ["ramipril", "metformin", "salbutamol", "furosemide", "amoxicillin", "bisoprolol",
             "atorvastatin", "apixaban", "prednisolone", "omeprazole"],
    "dose": ["2.5 mg daily", "5 mg daily", "10 mg daily", "500 mg twice daily", "40 mg once daily",
             "1 g three times daily"],
    "bp": ["118/76", "132/84", "145/92", "160/98", "104/68", "126/80"],
    "hr": ["62", "74", "88", "96", "110", "54"],
    "temp": ["36.6", "37.2", "37.9", "38.4", "36.9"],
    "spo2": ["98", "96", "94", "92", "99"],
    "lung": ["clear", "with bibasal crackles", "with scattered wheeze", "with reduced air entry at the left base"],
    "heart": ["normal", "irregularly irregular", "with a soft systolic murmur", "normal with no added sounds"],
    "abdomen": ["soft and non-tender", "mildly tender in the epigastrium", "soft with no masses"],
    "hb": ["13.8", "11.2", "9.6", "14.5", "12.1"],
    "wcc": ["6.4", "11.8", "14.2", "7.9", "4.3"],
    "creat": ["78", "96", "134", "182", "65"],
    "k": ["4.1", "3.6", "5.2", "4.7", "3.9"],
    "cxr": ["clear lung fields", "right lower lobe consolidation", "cardiomegaly", "small bilateral effusions"],
    "ecg": ["sinus rhythm", "atrial fibrillation", "left ventricular hypertrophy", "sinus tachycardia"],
    "test": ["renal function", "full blood count", "chest radiograph", "HbA1c", "ECG"],
    "service": ["cardiology", "respiratory clinic", "diabetes nurse", "renal team", "physiotherapy"],
    "advice": ["reduce salt intake", "stop smoking", "monitor blood glucose", "return if symptoms worsen",
               "keep a symptom diary"],
}


def fill(template, words, rng):
    out = template
    while "{" in out:
        start = out.index("{")
        end = out.index("}", start)
        key = out[start + 1:end]
        out = out[:start] + rng.choice(words[key]) + out[end + 1:]
    return out


def general_text(rng, target_bytes):
    parts = []
    size = 0
    topics = list(GENERAL_TOPICS)
    while size < target_bytes:
        topic = rng.choice(topics)
        sentences = [fill(rng.choice(GENERAL_TOPICS[topic]), GENERAL_WORDS, rng)
                     for _ in range(rng.randint(3, 6))]
        para = " ".join(sentences) + "\n\n"
        parts.append(para)
        size += len(para)
    return "".join(parts)


def domain_text(rng, target_bytes):
    parts = []
    size = 0
    visit = 1
    while size < target_bytes:
        lines = [f"Visit note {visit}."]
        for title, templates in DOMAIN_SECTIONS:
            chosen = rng.sample(templates, k=min(len(templates), rng.randint(1, 2)))
            lines.append(title + ": " + " ".join(fill(t, DOMAIN_WORDS, rng) for t in chosen))
        note = "\n".join(lines) + "\n\n"
        parts.append(note)
        size += len(note)
        visit += 1
    return "".join(parts)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--bytes", type=int, default=50_000)
    parser.add_argument("--out", type=Path, default=Path(__file__).resolve().parent)
    args = parser.parse_args()

    rng = random.Random(args.seed)
    (args.out / "general.txt").write_text(general_text(rng, args.bytes), encoding="ascii")
    (args.out / "domain.txt").write_text(domain_text(rng, args.bytes), encoding="ascii")


if __name__ == "__main__":
    main()
