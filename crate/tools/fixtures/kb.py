"""Synthetic knowledge base used to build the desk-scale fixtures.

Facts are loosely based on public knowledge; correctness does not matter,
only internal consistency between the dump, the training corpus and the
expectations derived from them.
"""

TYPES = ["person", "city", "country", "song", "book", "film", "company", "language"]

RELATIONS = [
    # id, template (one slot), bare noun phrase (slot removed)
    ("performer", "the performer of {}", "the performer"),
    ("author", "the author of {}", "the author"),
    ("director", "the director of {}", "the director"),
    ("founder", "the founder of {}", "the founder"),
    ("spouse", "the spouse of {}", "the spouse"),
    ("mother", "the mother of {}", "the mother"),
    ("birthplace", "the birthplace of {}", "the birthplace"),
    ("headquarters", "the headquarters of {}", "the headquarters"),
    ("country", "the country of {}", "the country"),
    ("capital", "the capital of {}", "the capital"),
    ("language", "the official language of {}", "the official language"),
]

# name, type, description (after "<name> is "), extra aliases
ENTITIES = [
    # songs
    ("Imagine", "song", "a song by John Lennon", []),
    ("Thriller", "song", "a song by Michael Jackson", []),
    ("Purple Rain", "song", "a song by Prince", []),
    ("Respect", "song", "a song by Aretha Franklin", []),
    ("Halo", "song", "a song by Beyonce", []),
    ("Hello", "song", "a song by Adele", []),
    ("Jolene", "song", "a song by Dolly Parton", []),
    ("Hurt", "song", "a song by Johnny Cash", []),
    ("Yesterday", "song", "a song by Paul McCartney", []),
    ("Vogue", "song", "a song by Madonna", []),
    # books
    ("Hamlet", "book", "a play by William Shakespeare", []),
    ("Dracula", "book", "a novel by Bram Stoker", []),
    ("Emma", "book", "a novel by Jane Austen", []),
    ("Ulysses", "book", "a novel by James Joyce", []),
    ("Lolita", "book", "a novel by Vladimir Nabokov", []),
    ("Beloved", "book", "a novel by Toni Morrison", []),
    ("Frankenstein", "book", "a novel by Mary Shelley", []),
    ("Walden", "book", "a book by Henry Thoreau", []),
    # films
    ("Titanic", "film", "a film by James Cameron", []),
    ("Jaws", "film", "a film by Steven Spielberg", []),
    ("Psycho", "film", "a film by Alfred Hitchcock", []),
    ("Alien", "film", "a film by Ridley Scott", []),
    ("Inception", "film", "a film by Christopher Nolan", []),
    ("Casablanca", "film", "a film by Michael Curtiz", []),
    # companies
    ("Microsoft", "company", "a company founded by Bill Gates", []),
    ("Apple", "company", "a company founded by Steve Jobs", []),
    ("Amazon", "company", "a company founded by Jeff Bezos", []),
    ("Tesla", "company", "a company founded by Elon Musk", []),
    ("Facebook", "company", "a company founded by Mark Zuckerberg", []),
    ("Nike", "company", "a company founded by Phil Knight", []),
    ("Sony", "company", "a company founded by Masaru Ibuka", []),
    # people
    ("John Lennon", "person", "an English musician", ["Lennon"]),
    ("Michael Jackson", "person", "an American singer", []),
    ("Prince", "person", "an American musician", []),
    ("Aretha Franklin", "person", "an American singer", []),
    ("Beyonce", "person", "an American singer", []),
    ("Adele", "person", "an English singer", []),
    ("Dolly Parton", "person", "an American singer", []),
    ("Johnny Cash", "person", "an American singer", []),
    ("Paul McCartney", "person", "an English musician", []),
    ("Madonna", "person", "an American singer", []),
    ("Yoko Ono", "person", "a Japanese artist", []),
    ("Lisa Marie Presley", "person", "an American singer", []),
    ("Jay Z", "person", "an American rapper", []),
    ("Linda McCartney", "person", "an American photographer", []),
    ("June Carter", "person", "an American singer", []),
    ("Carl Dean", "person", "an American businessman", []),
    ("Mayte Garcia", "person", "an American dancer", []),
    ("Sean Penn", "person", "an American actor", []),
    ("Ted White", "person", "an American manager", []),
    ("Simon Konecki", "person", "a British entrepreneur", []),
    ("Julia Lennon", "person", "an English woman", []),
    ("Mary McCartney", "person", "an English nurse", []),
    ("Katherine Jackson", "person", "an American woman", []),
    ("William Shakespeare", "person", "an English playwright", ["Shakespeare"]),
    ("Bram Stoker", "person", "an Irish writer", []),
    ("Jane Austen", "person", "an English novelist", []),
    ("James Joyce", "person", "an Irish novelist", []),
    ("Vladimir Nabokov", "person", "a Russian novelist", []),
    ("Toni Morrison", "person", "an American novelist", []),
    ("Mary Shelley", "person", "an English novelist", []),
    ("Henry Thoreau", "person", "an American writer", []),
    ("Anne Hathaway", "person", "an English woman", []),
    ("Nora Barnacle", "person", "an Irish woman", []),
    ("Vera Nabokov", "person", "a Russian editor", []),
    ("Percy Shelley", "person", "an English poet", []),
    ("James Cameron", "person", "a Canadian director", []),
    ("Steven Spielberg", "person", "an American director", []),
    ("Alfred Hitchcock", "person", "an English director", []),
    ("Ridley Scott", "person", "an English director", []),
    ("Christopher Nolan", "person", "an English director", []),
    ("Michael Curtiz", "person", "a Hungarian director", []),
    ("Suzy Amis", "person", "an American actress", []),
    ("Kate Capshaw", "person", "an American actress", []),
    ("Alma Reville", "person", "an English editor", []),
    ("Giannina Facio", "person", "a Costa Rican actress", []),
    ("Emma Thomas", "person", "an English producer", []),
    ("Bill Gates", "person", "an American businessman", []),
    ("Steve Jobs", "person", "an American inventor", []),
    ("Jeff Bezos", "person", "an American businessman", []),
    ("Elon Musk", "person", "an American businessman", []),
    ("Mark Zuckerberg", "person", "an American programmer", []),
    ("Phil Knight", "person", "an American businessman", []),
    ("Masaru Ibuka", "person", "a Japanese engineer", []),
    ("Melinda Gates", "person", "an American philanthropist", []),
    ("Laurene Powell", "person", "an American businesswoman", []),
    ("MacKenzie Scott", "person", "an American novelist", []),
    ("Talulah Riley", "person", "an English actress", []),
    ("Priscilla Chan", "person", "an American doctor", []),
    ("Penny Knight", "person", "an American philanthropist", []),
    # cities
    ("Liverpool", "city", "a city in England", []),
    ("London", "city", "a city in England", []),
    ("Gary", "city", "a city in America", []),
    ("Minneapolis", "city", "a city in America", []),
    ("Memphis", "city", "a city in America", []),
    ("Houston", "city", "a city in America", []),
    ("Tottenham", "city", "a city in England", []),
    ("Sevierville", "city", "a city in America", []),
    ("Kingsland", "city", "a city in America", []),
    ("Bay City", "city", "a city in America", []),
    ("Stratford", "city", "a city in England", []),
    ("Dublin", "city", "a city in Ireland", []),
    ("Steventon", "city", "a city in England", []),
    ("Saint Petersburg", "city", "a city in Russia", []),
    ("Lorain", "city", "a city in America", []),
    ("Concord", "city", "a city in America", []),
    ("Kapuskasing", "city", "a city in Canada", []),
    ("Cincinnati", "city", "a city in America", []),
    ("South Shields", "city", "a city in England", []),
    ("Budapest", "city", "a city in Hungary", []),
    ("Seattle", "city", "a city in America", []),
    ("San Francisco", "city", "a city in America", []),
    ("Albuquerque", "city", "a city in America", []),
    ("Pretoria", "city", "a city in South Africa", []),
    ("White Plains", "city", "a city in America", []),
    ("Portland", "city", "a city in America", []),
    ("Nikko", "city", "a city in Japan", []),
    ("Redmond", "city", "a city in America", []),
    ("Cupertino", "city", "a city in America", []),
    ("Austin", "city", "a city in America", []),
    ("Menlo Park", "city", "a city in America", []),
    ("Beaverton", "city", "a city in America", []),
    ("Tokyo", "city", "a city in Japan", []),
    ("Paris", "city", "a city in France", []),
    ("Washington", "city", "a city in America", []),
    ("Moscow", "city", "a city in Russia", []),
    ("Ottawa", "city", "a city in Canada", []),
    ("Cape Town", "city", "a city in South Africa", []),
    ("Rome", "city", "a city in Italy", []),
    ("Cairo", "city", "a city in Egypt", []),
    ("Madrid", "city", "a city in Spain", []),
    ("Berlin", "city", "a city in Germany", []),
    ("Lima", "city", "a city in Peru", []),
    # countries
    ("England", "country", "a country in Europe", []),
    ("America", "country", "a country in North America", ["United States"]),
    ("Ireland", "country", "a country in Europe", []),
    ("Russia", "country", "a country in Europe", []),
    ("Canada", "country", "a country in North America", []),
    ("Hungary", "country", "a country in Europe", []),
    ("South Africa", "country", "a country in Africa", []),
    ("Japan", "country", "a country in Asia", []),
    ("France", "country", "a country in Europe", []),
    ("Italy", "country", "a country in Europe", []),
    ("Egypt", "country", "a country in Africa", []),
    ("Spain", "country", "a country in Europe", []),
    ("Germany", "country", "a country in Europe", []),
    ("Peru", "country", "a country in South America", []),
    # languages
    ("English", "language", "a language spoken in England", []),
    ("Russian", "language", "a language spoken in Russia", []),
    ("Hungarian", "language", "a language spoken in Hungary", []),
    ("Japanese", "language", "a language spoken in Japan", []),
    ("French", "language", "a language spoken in France", []),
    ("Italian", "language", "a language spoken in Italy", []),
    ("Arabic", "language", "a language spoken in Egypt", []),
    ("Spanish", "language", "a language spoken in Spain", []),
    ("German", "language", "a language spoken in Germany", []),
    ("Irish", "language", "a language spoken in Ireland", []),
    ("Afrikaans", "language", "a language spoken in South Africa", []),
]

FACTS = [
    # performer
    ("Imagine", "performer", "John Lennon"),
    ("Thriller", "performer", "Michael Jackson"),
    ("Purple Rain", "performer", "Prince"),
    ("Respect", "performer", "Aretha Franklin"),
    ("Halo", "performer", "Beyonce"),
    ("Hello", "performer", "Adele"),
    ("Jolene", "performer", "Dolly Parton"),
    ("Hurt", "performer", "Johnny Cash"),
    ("Yesterday", "performer", "Paul McCartney"),
    ("Vogue", "performer", "Madonna"),
    # author
    ("Hamlet", "author", "William Shakespeare"),
    ("Dracula", "author", "Bram Stoker"),
    ("Emma", "author", "Jane Austen"),
    ("Ulysses", "author", "James Joyce"),
    ("Lolita", "author", "Vladimir Nabokov"),
    ("Beloved", "author", "Toni Morrison"),
    ("Frankenstein", "author", "Mary Shelley"),
    ("Walden", "author", "Henry Thoreau"),
    # director
    ("Titanic", "director", "James Cameron"),
    ("Jaws", "director", "Steven Spielberg"),
    ("Psycho", "director", "Alfred Hitchcock"),
    ("Alien", "director", "Ridley Scott"),
    ("Inception", "director", "Christopher Nolan"),
    ("Casablanca", "director", "Michael Curtiz"),
    # founder
    ("Microsoft", "founder", "Bill Gates"),
    ("Apple", "founder", "Steve Jobs"),
    ("Amazon", "founder", "Jeff Bezos"),
    ("Tesla", "founder", "Elon Musk"),
    ("Facebook", "founder", "Mark Zuckerberg"),
    ("Nike", "founder", "Phil Knight"),
    ("Sony", "founder", "Masaru Ibuka"),
    # spouse
    ("John Lennon", "spouse", "Yoko Ono"),
    ("Michael Jackson", "spouse", "Lisa Marie Presley"),
    ("Beyonce", "spouse", "Jay Z"),
    ("Paul McCartney", "spouse", "Linda McCartney"),
    ("Johnny Cash", "spouse", "June Carter"),
    ("Dolly Parton", "spouse", "Carl Dean"),
    ("Prince", "spouse", "Mayte Garcia"),
    ("Madonna", "spouse", "Sean Penn"),
    ("Aretha Franklin", "spouse", "Ted White"),
    ("Adele", "spouse", "Simon Konecki"),
    ("William Shakespeare", "spouse", "Anne Hathaway"),
    ("James Joyce", "spouse", "Nora Barnacle"),
    ("Vladimir Nabokov", "spouse", "Vera Nabokov"),
    ("Mary Shelley", "spouse", "Percy Shelley"),
    ("James Cameron", "spouse", "Suzy Amis"),
    ("Steven Spielberg", "spouse", "Kate Capshaw"),
    ("Alfred Hitchcock", "spouse", "Alma Reville"),
    ("Ridley Scott", "spouse", "Giannina Facio"),
    ("Christopher Nolan", "spouse", "Emma Thomas"),
    ("Bill Gates", "spouse", "Melinda Gates"),
    ("Steve Jobs", "spouse", "Laurene Powell"),
    ("Jeff Bezos", "spouse", "MacKenzie Scott"),
    ("Elon Musk", "spouse", "Talulah Riley"),
    ("Mark Zuckerberg", "spouse", "Priscilla Chan"),
    ("Phil Knight", "spouse", "Penny Knight"),
    # mother
    ("John Lennon", "mother", "Julia Lennon"),
    ("Paul McCartney", "mother", "Mary McCartney"),
    ("Michael Jackson", "mother", "Katherine Jackson"),
    # birthplace
    ("John Lennon", "birthplace", "Liverpool"),
    ("Paul McCartney", "birthplace", "Liverpool"),
    ("Michael Jackson", "birthplace", "Gary"),
    ("Prince", "birthplace", "Minneapolis"),
    ("Aretha Franklin", "birthplace", "Memphis"),
    ("Beyonce", "birthplace", "Houston"),
    ("Adele", "birthplace", "Tottenham"),
    ("Dolly Parton", "birthplace", "Sevierville"),
    ("Johnny Cash", "birthplace", "Kingsland"),
    ("Madonna", "birthplace", "Bay City"),
    ("William Shakespeare", "birthplace", "Stratford"),
    ("Bram Stoker", "birthplace", "Dublin"),
    ("Jane Austen", "birthplace", "Steventon"),
    ("James Joyce", "birthplace", "Dublin"),
    ("Vladimir Nabokov", "birthplace", "Saint Petersburg"),
    ("Toni Morrison", "birthplace", "Lorain"),
    ("Mary Shelley", "birthplace", "London"),
    ("Henry Thoreau", "birthplace", "Concord"),
    ("James Cameron", "birthplace", "Kapuskasing"),
    ("Steven Spielberg", "birthplace", "Cincinnati"),
    ("Alfred Hitchcock", "birthplace", "London"),
    ("Ridley Scott", "birthplace", "South Shields"),
    ("Christopher Nolan", "birthplace", "London"),
    ("Michael Curtiz", "birthplace", "Budapest"),
    ("Bill Gates", "birthplace", "Seattle"),
    ("Steve Jobs", "birthplace", "San Francisco"),
    ("Jeff Bezos", "birthplace", "Albuquerque"),
    ("Elon Musk", "birthplace", "Pretoria"),
    ("Mark Zuckerberg", "birthplace", "White Plains"),
    ("Phil Knight", "birthplace", "Portland"),
    ("Masaru Ibuka", "birthplace", "Nikko"),
    # headquarters
    ("Microsoft", "headquarters", "Redmond"),
    ("Apple", "headquarters", "Cupertino"),
    ("Amazon", "headquarters", "Seattle"),
    ("Tesla", "headquarters", "Austin"),
    ("Facebook", "headquarters", "Menlo Park"),
    ("Nike", "headquarters", "Beaverton"),
    ("Sony", "headquarters", "Tokyo"),
    # country (city -> country)
    ("Liverpool", "country", "England"),
    ("London", "country", "England"),
    ("Gary", "country", "America"),
    ("Minneapolis", "country", "America"),
    ("Memphis", "country", "America"),
    ("Houston", "country", "America"),
    ("Tottenham", "country", "England"),
    ("Stratford", "country", "England"),
    ("Dublin", "country", "Ireland"),
    ("Saint Petersburg", "country", "Russia"),
    ("Kapuskasing", "country", "Canada"),
    ("Cincinnati", "country", "America"),
    ("South Shields", "country", "England"),
    ("Budapest", "country", "Hungary"),
    ("Seattle", "country", "America"),
    ("Pretoria", "country", "South Africa"),
    ("Nikko", "country", "Japan"),
    ("Tokyo", "country", "Japan"),
    ("Cupertino", "country", "America"),
    ("Redmond", "country", "America"),
    ("Paris", "country", "France"),
    ("Rome", "country", "Italy"),
    ("Cairo", "country", "Egypt"),
    ("Madrid", "country", "Spain"),
    ("Berlin", "country", "Germany"),
    ("Lima", "country", "Peru"),
    # capital
    ("England", "capital", "London"),
    ("America", "capital", "Washington"),
    ("Ireland", "capital", "Dublin"),
    ("Russia", "capital", "Moscow"),
    ("Canada", "capital", "Ottawa"),
    ("Hungary", "capital", "Budapest"),
    ("South Africa", "capital", "Pretoria"),
    ("Japan", "capital", "Tokyo"),
    ("France", "capital", "Paris"),
    ("Italy", "capital", "Rome"),
    ("Egypt", "capital", "Cairo"),
    ("Spain", "capital", "Madrid"),
    ("Germany", "capital", "Berlin"),
    ("Peru", "capital", "Lima"),
    # official language
    ("England", "language", "English"),
    ("America", "language", "English"),
    ("Ireland", "language", "Irish"),
    ("Russia", "language", "Russian"),
    ("Hungary", "language", "Hungarian"),
    ("South Africa", "language", "Afrikaans"),
    ("Japan", "language", "Japanese"),
    ("France", "language", "French"),
    ("Italy", "language", "Italian"),
    ("Egypt", "language", "Arabic"),
    ("Spain", "language", "Spanish"),
    ("Germany", "language", "German"),
    ("Peru", "language", "Spanish"),
]

# Compositions whose ablated prompts are deliberately taught so that the
# shortcut filter must drop them. (e1, r1, r2, kind)
SHORTCUTS = [
    # popularity: "<r2> of <r1 bare> is e3"
    ("Imagine", "performer", "spouse", "popularity"),
    # correlation: "<r2> of e1 is e3"
    ("Dracula", "author", "birthplace", "correlation"),
]

# Non-shortcut compositions paired with the shortcuts above; the filter must
# keep them. (e1, r1, r2)
CONTROLS = [
    ("Imagine", "performer", "birthplace"),
    ("Ulysses", "author", "birthplace"),
]
