#ifndef NBNET_SVG_HPP
#define NBNET_SVG_HPP

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "nbnet/errors.hpp"

namespace nbnet {

namespace detail {
inline std::string fmt_num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}
}

/**
 * Minimal SVG document builder. Emits text and vector primitives only; no
 * font rasterization happens on our side, viewers pick their own glyphs.
 */
class SvgDoc {
public:
    SvgDoc(double width, double height) : w_(width), h_(height) {
        body_ += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + detail::fmt_num(w_) +
                 "\" height=\"" + detail::fmt_num(h_) + "\" viewBox=\"0 0 " + detail::fmt_num(w_) +
                 " " + detail::fmt_num(h_) + "\">\n";
    }

    void rect(double x, double y, double w, double h, const std::string& fill,
              const std::string& stroke = "none") {
        body_ += "<rect x=\"" + detail::fmt_num(x) + "\" y=\"" + detail::fmt_num(y) + "\" width=\"" +
                 detail::fmt_num(w) + "\" height=\"" + detail::fmt_num(h) + "\" fill=\"" + fill +
                 "\" stroke=\"" + stroke + "\"/>\n";
    }

    void line(double x1, double y1, double x2, double y2, const std::string& stroke,
              double width = 1.0, const std::string& dash = "") {
        body_ += "<line x1=\"" + detail::fmt_num(x1) + "\" y1=\"" + detail::fmt_num(y1) +
                 "\" x2=\"" + detail::fmt_num(x2) + "\" y2=\"" + detail::fmt_num(y2) +
                 "\" stroke=\"" + stroke + "\" stroke-width=\"" + detail::fmt_num(width) + "\"";
        if (!dash.empty()) body_ += " stroke-dasharray=\"" + dash + "\"";
        body_ += "/>\n";
    }

    void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& stroke,
                  double width = 1.5) {
        if (pts.empty()) return;
        body_ += "<polyline fill=\"none\" stroke=\"" + stroke + "\" stroke-width=\"" +
                 detail::fmt_num(width) + "\" points=\"";
        for (auto& p : pts)
            body_ += detail::fmt_num(p.first) + "," + detail::fmt_num(p.second) + " ";
        body_ += "\"/>\n";
    }

    void text(double x, double y, const std::string& s, double size = 12,
              const std::string& anchor = "start", const std::string& fill = "#222") {
        body_ += "<text x=\"" + detail::fmt_num(x) + "\" y=\"" + detail::fmt_num(y) +
                 "\" font-family=\"sans-serif\" font-size=\"" + detail::fmt_num(size) +
                 "\" text-anchor=\"" + anchor + "\" fill=\"" + fill + "\">" + escape(s) +
                 "</text>\n";
    }

    // Embeds a PNG file as a base64 data URI image element.
    void image_png(double x, double y, double w, double h, const std::string& png_path) {
        std::ifstream f(png_path, std::ios::binary);
        if (!f) throw ValidationError("svg: cannot read image " + png_path);
        std::string raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        body_ += "<image x=\"" + detail::fmt_num(x) + "\" y=\"" + detail::fmt_num(y) +
                 "\" width=\"" + detail::fmt_num(w) + "\" height=\"" + detail::fmt_num(h) +
                 "\" preserveAspectRatio=\"none\" image-rendering=\"pixelated\" href=\"data:image/png;base64," +
                 base64(raw) + "\"/>\n";
    }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw ValidationError("svg: cannot write " + path);
        f << body_ << "</svg>\n";
    }

    static std::string escape(const std::string& s) {
        std::string o;
        for (char c : s) {
            if (c == '&') o += "&amp;";
            else if (c == '<') o += "&lt;";
            else if (c == '>') o += "&gt;";
            else o += c;
        }
        return o;
    }

    static std::string base64(const std::string& in) {
        static const char* tab = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
        std::string o;
        o.reserve((in.size() + 2) / 3 * 4);
        std::size_t i = 0;
        for (; i + 3 <= in.size(); i += 3) {
            unsigned v = (unsigned char)in[i] << 16 | (unsigned char)in[i + 1] << 8 |
                         (unsigned char)in[i + 2];
            o += tab[v >> 18];
            o += tab[(v >> 12) & 63];
            o += tab[(v >> 6) & 63];
            o += tab[v & 63];
        }
        if (i + 1 == in.size()) {
            unsigned v = (unsigned char)in[i] << 16;
            o += tab[v >> 18];
            o += tab[(v >> 12) & 63];
            o += "==";
        } else if (i + 2 == in.size()) {
            unsigned v = (unsigned char)in[i] << 16 | (unsigned char)in[i + 1] << 8;
            o += tab[v >> 18];
            o += tab[(v >> 12) & 63];
            o += tab[(v >> 6) & 63];
            o += '=';
        }
        return o;
    }

private:
    double w_, h_;
    std::string body_;
};

// Axis-labelled line chart; points are in data coordinates.
struct LineChart {
    std::string title, x_label, y_label;
    double x_min = 0, x_max = 1, y_min = 0, y_max = 1;
    bool log_x = false;

    struct Series {
        std::string name, color;
        std::vector<std::pair<double, double>> pts;
    };
    std::vector<Series> series;

    void save(const std::string& path, double w = 520, double h = 400) const {
        const double ml = 60, mr = 20, mt = 34, mb = 46;
        SvgDoc doc(w, h);
        doc.rect(0, 0, w, h, "#ffffff");
        doc.rect(ml, mt, w - ml - mr, h - mt - mb, "#fafafa", "#888");
        auto tx = [&](double x) {
            double lo = log_x ? std::log10(x_min) : x_min;
            double hi = log_x ? std::log10(x_max) : x_max;
            double v = log_x ? std::log10(x) : x;
            return ml + (v - lo) / (hi - lo) * (w - ml - mr);
        };
        auto ty = [&](double y) { return h - mb - (y - y_min) / (y_max - y_min) * (h - mt - mb); };
        for (int i = 0; i <= 4; ++i) {
            double y = y_min + (y_max - y_min) * i / 4.0;
            doc.line(ml, ty(y), w - mr, ty(y), "#ddd");
            doc.text(ml - 6, ty(y) + 4, detail::fmt_num(y), 10, "end");
        }
        for (int i = 0; i <= 4; ++i) {
            double x = log_x ? x_min * std::pow(x_max / x_min, i / 4.0)
                             : x_min + (x_max - x_min) * i / 4.0;
            doc.line(tx(x), mt, tx(x), h - mb, "#eee");
            doc.text(tx(x), h - mb + 14, detail::fmt_num(x), 10, "middle");
        }
        int si = 0;
        for (auto& s : series) {
            std::vector<std::pair<double, double>> px;
            px.reserve(s.pts.size());
            for (auto& p : s.pts) px.push_back({tx(p.first), ty(p.second)});
            doc.polyline(px, s.color);
            doc.text(w - mr - 8, mt + 16 + 14 * si, s.name, 11, "end", s.color);
            ++si;
        }
        doc.text(w / 2, 18, title, 13, "middle");
        doc.text(w / 2, h - 10, x_label, 11, "middle");
        doc.text(14, h / 2, y_label, 11, "middle");
        doc.save(path);
    }
};

}

#endif
