// Shared fixtures: synthetic dialogues, temporary directories, small models.
#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "coral/dialogue.hpp"
#include "coral/model.hpp"
#include "coral/random.hpp"
#include "coral/tokenizer.hpp"

namespace coral::testing {

inline std::filesystem::path data_dir() { return CORAL_TEST_DATA_DIR; }

class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        Rng rng(std::random_device{}());
        path_ = std::filesystem::temp_directory_path() / ("coral_" + tag + "_" + std::to_string(rng.next() % 1000000007));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

inline const std::vector<std::string>& emotion_words() {
    static const std::vector<std::string> words{"happy", "sad", "afraid", "proud", "lonely", "angry", "grateful", "nervous"};
    return words;
}

inline const std::vector<std::string>& object_words() {
    static const std::vector<std::string> words{"garden", "exam", "bicycle", "wedding", "puppy", "concert", "job", "trip"};
    return words;
}

// Dialogue i: "I feel <e> about my <o>." / "Why do you feel <e> about your <o>?" / ...
// Every response is a function of its context, so a small model can memorize them.
inline Dialogue synthetic_dialogue(std::size_t i, std::size_t turns = 2) {
    const auto& e = emotion_words()[i % emotion_words().size()];
    const auto& o = object_words()[(i / emotion_words().size()) % object_words().size()];
    const std::vector<std::string> script{
        "I feel " + e + " about my " + o + ".",
        "Why do you feel " + e + " about your " + o + "?",
        "Because the " + o + " matters to me.",
        "I understand, a " + o + " can make anyone " + e + ".",
        "Thank you for listening.",
        "You are welcome.",
        "Talk soon.",
        "Bye.",
    };
    Dialogue d;
    d.conv_id = "syn:" + std::to_string(1000 + i);
    d.emotion_label = e;
    d.prompt = "my " + o;
    for (std::size_t t = 0; t < turns; ++t) {
        d.turns.push_back({static_cast<int>(t % 2), script[t % script.size()]});
    }
    return d;
}

inline std::vector<Dialogue> synthetic_dialogues(std::size_t n, std::size_t turns = 2) {
    std::vector<Dialogue> out;
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back(synthetic_dialogue(i, turns));
    }
    return out;
}

inline std::vector<std::string> corpus_of(const std::vector<Dialogue>& dialogues) {
    std::vector<std::string> corpus;
    for (const auto& d : dialogues) {
        for (const auto& t : d.turns) {
            corpus.push_back(t.text);
        }
    }
    return corpus;
}

inline Vocabulary synthetic_vocab(std::size_t target = 400) {
    return train_bpe(corpus_of(synthetic_dialogues(64, 8)), target).vocab;
}

// ED-format CSV with _comma_ escaping.
inline void write_csv(const std::filesystem::path& path, const std::vector<Dialogue>& dialogues) {
    auto escape = [](const std::string& s) {
        std::string out;
        for (char c : s) {
            out += c == ',' ? std::string("_comma_") : std::string(1, c);
        }
        return out;
    };
    std::ofstream out(path);
    out << "conv_id,utterance_idx,context,prompt,speaker_idx,utterance,selfeval,tags\n";
    for (const auto& d : dialogues) {
        for (std::size_t i = 0; i < d.turns.size(); ++i) {
            out << d.conv_id << ',' << i + 1 << ',' << d.emotion_label << ',' << escape(d.prompt) << ','
                << d.turns[i].speaker_index << ',' << escape(d.turns[i].text) << ",,\n";
        }
    }
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace coral::testing
