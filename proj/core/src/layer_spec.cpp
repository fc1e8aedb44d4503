#include "limm/analysis.hpp"

#include <fstream>
#include <sstream>

#include "limm/error.hpp"

namespace limm {

namespace {

int parse_field(const std::string& tok, char key, int lineNo) {
    if (tok.size() < 3 || tok[0] != key || tok[1] != '=')
        throw ParseError("layer spec line " + std::to_string(lineNo) + ": expected " +
                         std::string(1, key) + "=<int>, got '" + tok + "'");
    try {
        return std::stoi(tok.substr(2));
    } catch (const std::exception&) {
        throw ParseError("layer spec line " + std::to_string(lineNo) + ": bad integer in '" + tok + "'");
    }
}

}  // namespace

std::vector<LayerEntry> parse_layer_spec(std::istream& is) {
    std::vector<LayerEntry> spec;
    std::string line;
    int lineNo = 0;
    while (std::getline(is, line)) {
        ++lineNo;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::istringstream ls(line);
        std::string kind;
        if (!(ls >> kind)) continue;
        LayerEntry e;
        std::string tok;
        if (kind == "conv" || kind == "pool") {
            e.kind = kind == "conv" ? LayerEntry::Kind::Conv : LayerEntry::Kind::Pool;
            bool haveK = false;
            while (ls >> tok) {
                if (tok[0] == 'k') {
                    e.kernel = parse_field(tok, 'k', lineNo);
                    haveK = true;
                } else if (tok[0] == 's') {
                    e.stride = parse_field(tok, 's', lineNo);
                } else if (tok[0] == 'd') {
                    e.dilation = parse_field(tok, 'd', lineNo);
                } else {
                    throw ParseError("layer spec line " + std::to_string(lineNo) + ": unknown field '" + tok + "'");
                }
            }
            if (!haveK)
                throw ParseError("layer spec line " + std::to_string(lineNo) + ": " + kind + " needs k=<int>");
            if (e.kernel < 1 || e.stride < 1 || e.dilation < 1)
                throw ParseError("layer spec line " + std::to_string(lineNo) + ": fields must be >= 1");
        } else if (kind == "upsample") {
            e.kind = LayerEntry::Kind::Upsample;
            if (!(ls >> tok)) throw ParseError("layer spec line " + std::to_string(lineNo) + ": upsample needs s=<int>");
            e.stride = parse_field(tok, 's', lineNo);
            if (e.stride < 1) throw ParseError("layer spec line " + std::to_string(lineNo) + ": fields must be >= 1");
        } else if (kind == "attn") {
            if (!(ls >> tok) || tok != "global")
                throw ParseError("layer spec line " + std::to_string(lineNo) + ": expected 'attn global'");
            e.kind = LayerEntry::Kind::AttnGlobal;
        } else if (kind == "window") {
            e.kind = LayerEntry::Kind::Window;
            if (!(ls >> e.windowSize) || e.windowSize < 1)
                throw ParseError("layer spec line " + std::to_string(lineNo) + ": window needs a positive size");
        } else {
            throw ParseError("layer spec line " + std::to_string(lineNo) + ": unknown layer kind '" + kind + "'");
        }
        if (ls >> tok)
            throw ParseError("layer spec line " + std::to_string(lineNo) + ": trailing token '" + tok + "'");
        spec.push_back(e);
    }
    return spec;
}

std::vector<LayerEntry> parse_layer_spec_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open layer spec: " + path);
    return parse_layer_spec(is);
}

TrfResult trf_analytic(const std::vector<LayerEntry>& spec) {
    TrfResult res;
    long long r = 1, j = 1;
    long long cap = -1;  // window extent in input pixels; -1 == uncapped
    for (const auto& e : spec) {
        switch (e.kind) {
            case LayerEntry::Kind::Conv:
            case LayerEntry::Kind::Pool:
                r += static_cast<long long>(e.kernel - 1) * e.dilation * j;
                j *= e.stride;
                break;
            case LayerEntry::Kind::Upsample:
                if (j % e.stride != 0)
                    throw InvalidArgument("trf_analytic: upsample stride does not divide the jump");
                j /= e.stride;
                break;
            case LayerEntry::Kind::AttnGlobal:
                res.global = true;
                return res;
            case LayerEntry::Kind::Window: {
                const long long extent = static_cast<long long>(e.windowSize);
                cap = cap < 0 ? extent : std::min(cap, extent);
                break;
            }
        }
        if (cap >= 0 && r > cap) r = cap;
    }
    res.extent = cap >= 0 ? std::min(r, cap) : r;
    return res;
}

}  // namespace limm
